//! Replay storage of contiguous transitions with k-step window sampling.
//!
//! A [`SegmentBuffer`] keeps transitions in arrival order, grouped into
//! episodes, and evicts the oldest entries once capacity is exceeded.
//! Sampling draws either single transitions (uniform over everything stored)
//! or k-step windows: contiguous runs from a single episode, cut short only
//! by that episode's terminal transition.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Origin of the data a buffer stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Collected from the real environment.
    Env,
    /// Generated by the learned dynamics model.
    Model,
}

/// One step of experience.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
}

/// A sampled run of up to `window_len` consecutive transitions from one
/// episode.
///
/// `actions` and `rewards` hold fewer than `window_len` entries only when
/// the episode terminated inside the window; `done` is set in that case (and
/// when the final entry happens to be terminal), and `end` is always the
/// successor observation of the last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub end: Vec<f64>,
    pub done: bool,
    pub source: Source,
}

struct Stored {
    transition: Transition,
    episode: u64,
}

/// Ring replay storage grouped by episode, tagged with its data source.
///
/// The window length is fixed at construction; [`SegmentBuffer::window_count`]
/// tracks how many valid window start positions are currently stored, so
/// callers can tell in O(1) whether window sampling can succeed.
pub struct SegmentBuffer {
    source: Source,
    capacity: usize,
    window_len: usize,
    items: VecDeque<Stored>,
    episode: u64,
    open: bool,
    windows: usize,
    dims: Option<(usize, usize)>,
}

impl SegmentBuffer {
    pub fn new(source: Source, capacity: usize, window_len: usize) -> Result<Self> {
        if capacity == 0 || window_len == 0 {
            return Err(Error::Contract(
                "segment buffer needs positive capacity and window length".into(),
            ));
        }
        Ok(SegmentBuffer {
            source,
            capacity,
            window_len,
            items: VecDeque::new(),
            episode: 0,
            open: false,
            windows: 0,
            dims: None,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Number of stored positions a window can currently start from.
    pub fn window_count(&self) -> usize {
        self.windows
    }

    /// Appends one transition to the open episode, starting a new episode if
    /// the previous one has been closed.  A `done` transition closes the
    /// episode.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.validate(&t)?;
        self.dims = Some((t.observation.len(), t.action.len()));
        if !self.open {
            self.episode += 1;
            self.open = true;
        }
        let done = t.done;
        self.items.push_back(Stored {
            transition: t,
            episode: self.episode,
        });
        self.windows += self.fresh_windows_at_back();
        if done {
            self.open = false;
        }
        while self.items.len() > self.capacity {
            self.evict_front();
        }
        Ok(())
    }

    /// Closes the open episode without a terminal flag: later pushes start a
    /// fresh episode and no sampled window bridges the gap.
    pub fn end_episode(&mut self) {
        self.open = false;
    }

    /// Drops everything stored and closes any open episode.
    pub fn clear(&mut self) {
        self.items.clear();
        self.windows = 0;
        self.open = false;
    }

    /// Uniformly samples the index of one stored transition.
    pub fn sample_index(&self, rng: &mut Stream) -> Result<usize> {
        if self.items.is_empty() {
            return Err(Error::Capacity("cannot sample from an empty buffer".into()));
        }
        Ok(rng.gen_range(0..self.items.len()))
    }

    /// The transition stored at `index`, oldest first.
    pub fn transition(&self, index: usize) -> &Transition {
        &self.items[index].transition
    }

    /// Uniformly samples one window over all valid start positions.
    pub fn sample_window(&self, rng: &mut Stream) -> Result<Window> {
        if self.windows == 0 {
            return Err(Error::Capacity(format!(
                "buffer holds no complete {}-step windows",
                self.window_len
            )));
        }
        // Rejection over raw indices is uniform over valid starts; fall back
        // to enumeration if valid starts are a tiny fraction of storage.
        for _ in 0..64 {
            let i = rng.gen_range(0..self.items.len());
            if let Some((len, done)) = self.window_at(i) {
                return Ok(self.extract(i, len, done));
            }
        }
        let starts: Vec<usize> = (0..self.items.len())
            .filter(|&i| self.window_at(i).is_some())
            .collect();
        let i = starts[rng.gen_range(0..starts.len())];
        let (len, done) = self.window_at(i).expect("enumerated start is valid");
        Ok(self.extract(i, len, done))
    }

    fn validate(&self, t: &Transition) -> Result<()> {
        let finite = t.observation.iter().all(|v| v.is_finite())
            && t.action.iter().all(|v| v.is_finite())
            && t.next_observation.iter().all(|v| v.is_finite())
            && t.reward.is_finite();
        if !finite {
            return Err(Error::Numeric("non-finite transition pushed to buffer".into()));
        }
        if t.observation.len() != t.next_observation.len() {
            return Err(Error::Shape(
                "observation and successor widths differ".into(),
            ));
        }
        if let Some((obs, act)) = self.dims {
            // The first push fixes the widths for the buffer's lifetime.
            if t.observation.len() != obs || t.action.len() != act {
                return Err(Error::Shape(format!(
                    "transition widths {}/{} do not match buffer widths {}/{}",
                    t.observation.len(),
                    t.action.len(),
                    obs,
                    act
                )));
            }
        }
        if self.open {
            if let Some(back) = self.items.back() {
                if back.episode == self.episode
                    && back.transition.next_observation != t.observation
                {
                    return Err(Error::Contract(
                        "transition does not continue the open episode".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Valid-window check at start index `i`: number of stored transitions
    /// covered and whether the window ends on a terminal.
    fn window_at(&self, i: usize) -> Option<(usize, bool)> {
        let episode = self.items.get(i)?.episode;
        for m in 0..self.window_len {
            let item = match self.items.get(i + m) {
                Some(item) if item.episode == episode => item,
                // Episode ran out (still open, truncated, or partially
                // evicted successor episode) without a terminal inside the
                // window: no valid window starts here.
                _ => return None,
            };
            if item.transition.done {
                return Some((m + 1, true));
            }
        }
        Some((self.window_len, false))
    }

    /// Counts start positions that became valid when the newest item landed.
    fn fresh_windows_at_back(&self) -> usize {
        let p = self.items.len() - 1;
        let last = &self.items[p];
        let k = self.window_len;
        // Trailing same-episode run length, saturated at k.
        let mut run = 1;
        while run < k && run <= p && self.items[p - run].episode == last.episode {
            run += 1;
        }
        let mut fresh = usize::from(run == k);
        if last.transition.done {
            fresh += run.min(k - 1);
        }
        fresh
    }

    fn evict_front(&mut self) {
        if self.window_at(0).is_some() {
            self.windows -= 1;
        }
        self.items.pop_front();
    }

    fn extract(&self, i: usize, len: usize, done: bool) -> Window {
        let mut actions = Vec::with_capacity(len);
        let mut rewards = Vec::with_capacity(len);
        for m in 0..len {
            let t = &self.items[i + m].transition;
            actions.push(t.action.clone());
            rewards.push(t.reward);
        }
        Window {
            start: self.items[i].transition.observation.clone(),
            actions,
            rewards,
            end: self.items[i + len - 1].transition.next_observation.clone(),
            done,
            source: self.source,
        }
    }
}
