//! Per-GPU event loop.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::profiles::{ModelConfig, ProfileSet};
use crate::schedulers::{
    dstack_schedule, dynamic_fill, ms_to_slots, static_spatial, temporal_slices, wmax_min, DstackOptions,
    FillCandidate, RunKind, Scoreboard, SessionSchedule, Timeline,
};

use super::gpu::{apply_reconfiguration, complete_reconfiguration, GpuState};
use super::metrics::{ReconfigRecord, RunRecord};
use super::scenario::{ReconfigEvent, ResolvedModel, Scenario, SchedulerKind};

/// Fraction of the SLO kept as slack when a fill is triggered by deadline risk.
const FILL_GUARD: f64 = 0.4;

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Counters {
    pub arrived: u64,
    pub in_slo: u64,
    pub late: u64,
    pub dropped: u64,
    pub residual: u64,
    pub lat_sum_us: u128,
    pub lat_max_us: u64,
    pub hist: BTreeMap<u64, u64>,
    /// Completions per phase, by completion time.
    pub phase_done: Vec<u64>,
}

pub(crate) struct GpuInput<'a> {
    pub gpu: usize,
    pub models: Vec<&'a ResolvedModel>,
    pub arrivals: Vec<Vec<u64>>,
    pub reconfigurations: Vec<ReconfigEvent>,
}

pub(crate) struct GpuOutput {
    pub counters: Vec<Counters>,
    pub actual: Timeline,
    pub runs: Vec<RunRecord>,
    pub reconfigurations: Vec<ReconfigRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    RunEnd(usize),
    Reconfig(usize),
    ReconfigReady(usize),
    Session(usize),
    Slice,
    Planned(usize, usize),
    FillStart(usize),
    Arrival(usize),
    Wake(usize),
}

impl Ev {
    fn priority(self) -> u8 {
        match self {
            Ev::RunEnd(_) => 0,
            Ev::Reconfig(_) | Ev::ReconfigReady(_) => 1,
            Ev::Session(_) | Ev::Slice => 2,
            Ev::Planned(..) | Ev::FillStart(_) => 3,
            Ev::Arrival(_) => 4,
            Ev::Wake(_) => 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Resv {
    slots: usize,
    pct: f64,
}

#[derive(Debug, Clone, Copy)]
struct Fill {
    /// Instance GPU% when the fill was decided.
    inst_pct: f64,
    start: usize,
    slots: usize,
    pct: f64,
    batch: u32,
}

struct Model<'a> {
    res: &'a ResolvedModel,
    name: String,
    slo_us: u64,
    max_batch: u32,
    /// Beyond the knee extra SMs sit idle, so usage is clipped here.
    use_cap: f64,
    arrivals: Vec<u64>,
    next: usize,
    queue: VecDeque<u64>,
    running: Option<(u64, Vec<u64>)>,
    fill: Option<Fill>,
    wake_at: Option<u64>,
    c: Counters,
}

impl Model<'_> {
    fn busy_at(&self, t: u64) -> bool {
        self.running.as_ref().is_some_and(|(end, _)| *end > t)
    }
}

pub(crate) struct Engine<'a> {
    kind: SchedulerKind,
    gpu_idx: usize,
    slot: u64,
    end_us: u64,
    duration_us: u64,
    load_us: u64,
    switch_us: u64,
    drop_expired: bool,
    horizon: usize,
    m: Vec<Model<'a>>,
    gpu: GpuState,
    ev: BTreeMap<(u64, u8, u64), Ev>,
    seq: u64,
    reconf: Vec<ReconfigEvent>,
    profiles: ProfileSet,
    plan: Option<SessionSchedule>,
    plan_dirty: bool,
    board: Scoreboard,
    resv: Vec<BTreeMap<usize, Resv>>,
    session_slots: usize,
    slices: Vec<(usize, usize)>,
    phase_bounds_us: Vec<u64>,
    runs: Vec<RunRecord>,
    records: Vec<ReconfigRecord>,
}

fn us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(1.0) as u64
}

impl<'a> Engine<'a> {
    pub fn new(sc: &Scenario, input: GpuInput<'a>, kind: SchedulerKind) -> Result<Self> {
        let slot = sc.slot_us as u64;
        let duration_us = sc.duration_us();
        let max_slo = input.models.iter().map(|m| m.config.slo_ms).fold(0.0, f64::max);
        let drain = sc.drain_ms.unwrap_or(2.0 * max_slo);
        let end_us = duration_us + us(drain.max(0.0)).min(u64::MAX / 4);
        let horizon = end_us.div_ceil(slot) as usize;

        let knees: Vec<f64> = input.models.iter().map(|m| m.config.knee_pct).collect();
        let pcts = match kind {
            SchedulerKind::Dstack => knees.clone(),
            SchedulerKind::Temporal | SchedulerKind::Exclusive => vec![100.0; knees.len()],
            SchedulerKind::StaticSpatial => static_spatial(&knees),
            SchedulerKind::WmaxMin => wmax_min(&knees, 100.0)?,
        };
        if kind == SchedulerKind::Exclusive && input.models.len() > 1 {
            return Err(Error::Scenario("exclusive scheduling needs one model per GPU".into()));
        }
        let named: Vec<(String, f64)> = input
            .models
            .iter()
            .zip(&pcts)
            .map(|(m, &p)| (m.config.name.clone(), p))
            .collect();
        let gpu = GpuState::new(&named, horizon, sc.slot_us);
        let n_phases = sc.phase_bounds().len() - 1;
        let m: Vec<Model> = input
            .models
            .iter()
            .zip(input.arrivals)
            .map(|(r, arrivals)| Model {
                res: r,
                name: r.config.name.clone(),
                slo_us: us(r.config.slo_ms),
                max_batch: r.config.batch.min(r.profile.max_batch()).max(1),
                use_cap: r.config.knee_pct,
                arrivals,
                next: 0,
                queue: VecDeque::new(),
                running: None,
                fill: None,
                wake_at: None,
                c: Counters {
                    phase_done: vec![0; n_phases],
                    ..Default::default()
                },
            })
            .collect();
        let profiles = ProfileSet::new(input.models.iter().map(|r| r.profile.renamed(&r.config.name)).collect());
        let n = m.len();
        let mut e = Self {
            kind,
            gpu_idx: input.gpu,
            slot,
            end_us,
            duration_us,
            load_us: us(sc.load_time_ms).min(u64::MAX / 4),
            switch_us: (sc.switchover_ms * 1000.0).round() as u64,
            drop_expired: sc.drop_expired,
            horizon,
            m,
            gpu,
            ev: BTreeMap::new(),
            seq: 0,
            reconf: input.reconfigurations,
            profiles,
            plan: None,
            plan_dirty: false,
            board: Scoreboard::default(),
            resv: vec![BTreeMap::new(); n],
            session_slots: 0,
            slices: Vec::new(),
            phase_bounds_us: sc.phase_bounds().iter().map(|s| (s * 1e6).round() as u64).collect(),
            runs: Vec::new(),
            records: Vec::new(),
        };
        match kind {
            SchedulerKind::Dstack => {
                e.rebuild_plan()?;
                e.push(0, Ev::Session(0));
            }
            SchedulerKind::Temporal => {
                let cfgs = e.configs()?;
                e.session_slots = ms_to_slots(max_slo, sc.slot_us).max(1);
                e.slices = temporal_slices(&cfgs, e.session_slots);
                e.push(0, Ev::Session(0));
            }
            _ => {}
        }
        for i in 0..n {
            if let Some(&t) = e.m[i].arrivals.first() {
                e.push(t, Ev::Arrival(i));
            }
        }
        for k in 0..e.reconf.len() {
            let t = (e.reconf[k].time_ms * 1000.0).round() as u64;
            e.push(t, Ev::Reconfig(k));
        }
        Ok(e)
    }

    fn push(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.ev.insert((t, ev.priority(), self.seq), ev);
    }

    fn index(&self, name: &str) -> usize {
        self.m.iter().position(|m| m.name == name).expect("model on this GPU")
    }

    fn lat_us(&self, i: usize, pct: f64, b: u32) -> Result<u64> {
        Ok(us(self.m[i].res.profile.latency(pct.clamp(10.0, 100.0), b)?))
    }

    fn slots_of(&self, lat_us: u64) -> usize {
        lat_us.div_ceil(self.slot).max(1) as usize
    }

    /// Current operating points as scheduler inputs.
    fn configs(&self) -> Result<Vec<ModelConfig>> {
        self.m
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let pct = self.gpu.instances[i].gpu_pct;
                let mut c = m.res.config.clone();
                c.batch = m.max_batch;
                if self.kind == SchedulerKind::Dstack {
                    c.knee_pct = pct;
                    c.runtime_ms = self.lat_us(i, pct, m.max_batch)? as f64 / 1000.0;
                }
                c.validate()?;
                Ok(c)
            })
            .collect()
    }

    fn rebuild_plan(&mut self) -> Result<()> {
        let cfgs = self.configs()?;
        let opts = DstackOptions {
            slot_us: self.slot as u32,
            profiles: Some(&self.profiles),
            reduced_retry: true,
        };
        let plan = dstack_schedule(&cfgs, &opts)?.into_result()?;
        self.session_slots = plan.session_slots().max(1);
        self.plan = Some(plan);
        Ok(())
    }

    pub fn run(mut self) -> Result<GpuOutput> {
        while let Some(((t, _, _), ev)) = self.ev.pop_first() {
            if t > self.end_us && !matches!(ev, Ev::RunEnd(_)) {
                continue;
            }
            self.step(t, ev)?;
        }
        for m in &mut self.m {
            m.c.residual = m.queue.len() as u64;
        }
        Ok(GpuOutput {
            counters: self.m.into_iter().map(|m| m.c).collect(),
            actual: self.gpu.actual,
            runs: self.runs,
            reconfigurations: self.records,
        })
    }

    fn step(&mut self, now: u64, ev: Ev) -> Result<()> {
        match ev {
            Ev::Arrival(i) => {
                let m = &mut self.m[i];
                m.queue.push_back(m.arrivals[m.next]);
                m.c.arrived += 1;
                m.next += 1;
                if let Some(&t) = m.arrivals.get(m.next) {
                    self.push(t, Ev::Arrival(i));
                }
                self.trigger(now)
            }
            Ev::RunEnd(i) => {
                self.finish(i, now);
                self.trigger(now)
            }
            Ev::Wake(i) => {
                if self.m[i].wake_at == Some(now) {
                    self.m[i].wake_at = None;
                }
                self.trigger(now)
            }
            Ev::Session(k) => self.session(k, now),
            Ev::Slice => self.trigger(now),
            Ev::Planned(i, s) => self.planned(i, s, now),
            Ev::FillStart(i) => self.fill_start(i, now),
            Ev::Reconfig(k) => self.reconfig(k, now),
            Ev::ReconfigReady(i) => self.reconfig_ready(i, now),
        }
    }

    fn trigger(&mut self, now: u64) -> Result<()> {
        match self.kind {
            SchedulerKind::Dstack => self.fill(now),
            SchedulerKind::Temporal => self.temporal_try(now),
            _ => {
                for i in 0..self.m.len() {
                    self.greedy(i, now)?;
                }
                Ok(())
            }
        }
    }

    fn purge(&mut self, i: usize, now: u64) {
        if !self.drop_expired {
            return;
        }
        let m = &mut self.m[i];
        while m.queue.front().is_some_and(|&a| a + m.slo_us <= now) {
            m.queue.pop_front();
            m.c.dropped += 1;
        }
    }

    /// Largest batch up to `cap` whose run fits in `max_slots`.
    fn pick_batch(&self, i: usize, pct: f64, cap: u32, max_slots: usize) -> Result<Option<(u32, u64)>> {
        for b in (1..=cap).rev() {
            let l = self.lat_us(i, pct, b)?;
            if self.slots_of(l) <= max_slots {
                return Ok(Some((b, l)));
            }
        }
        Ok(None)
    }

    fn start_run(&mut self, i: usize, now: u64, pct: f64, b: u32, lat: u64, kind: RunKind) {
        let end = now + lat;
        let m = &mut self.m[i];
        let reqs: Vec<u64> = m.queue.drain(..b as usize).collect();
        let (oldest, newest) = (reqs[0], reqs[reqs.len() - 1]);
        debug_assert!(m.running.is_none(), "{} already running at {now}", m.name);
        m.running = Some((end, reqs));
        let cap = m.use_cap;
        let name = m.name.clone();
        self.gpu.add_usage(now, end, pct.min(cap));
        if self.kind == SchedulerKind::Dstack {
            self.board.record(&name);
        }
        self.runs.push(RunRecord {
            gpu: self.gpu_idx,
            model: name,
            start_us: now,
            end_us: end,
            gpu_pct: pct,
            batch: b,
            kind,
            oldest_arrival_us: oldest,
            newest_arrival_us: newest,
        });
        self.push(end, Ev::RunEnd(i));
    }

    fn finish(&mut self, i: usize, now: u64) {
        let duration = self.duration_us;
        let phase = self.phase_bounds_us.windows(2).position(|w| w[0] <= now && now < w[1]);
        let m = &mut self.m[i];
        let Some((_, reqs)) = m.running.take() else {
            return;
        };
        for a in reqs {
            let lat = now - a;
            if lat <= m.slo_us {
                m.c.in_slo += 1;
            } else {
                m.c.late += 1;
            }
            m.c.lat_sum_us += lat as u128;
            m.c.lat_max_us = m.c.lat_max_us.max(lat);
            *m.c.hist.entry(lat / 1000).or_default() += 1;
            if now < duration {
                if let Some(p) = phase {
                    m.c.phase_done[p] += 1;
                }
            }
        }
    }

    // ---- static partitions and exclusive GPUs

    fn greedy(&mut self, i: usize, now: u64) -> Result<()> {
        // a run ending now may still await its RunEnd
        if now >= self.end_us || self.m[i].running.is_some() || !self.gpu.instances[i].available_at(now) {
            return Ok(());
        }
        self.purge(i, now);
        let q = self.m[i].queue.len() as u32;
        if q == 0 {
            return Ok(());
        }
        let b = q.min(self.m[i].max_batch);
        let pct = self.gpu.instances[i].gpu_pct;
        let lat = self.lat_us(i, pct, b)?;
        self.start_run(i, now, pct, b, lat, RunKind::Planned);
        Ok(())
    }

    // ---- temporal slices

    fn temporal_try(&mut self, now: u64) -> Result<()> {
        if now >= self.end_us {
            return Ok(());
        }
        let slot = (now / self.slot) as usize;
        let (k, off) = (slot / self.session_slots, slot % self.session_slots);
        let Some(i) = self.slices.iter().position(|&(a, b)| a <= off && off < b) else {
            return Ok(());
        };
        let slice_end = (k * self.session_slots + self.slices[i].1) as u64 * self.slot;
        if self.m[i].running.is_some() {
            return Ok(());
        }
        self.purge(i, now);
        let cap = (self.m[i].queue.len() as u32).min(self.m[i].max_batch);
        for b in (1..=cap).rev() {
            let lat = self.lat_us(i, 100.0, b)?;
            if now + lat <= slice_end {
                self.start_run(i, now, 100.0, b, lat, RunKind::Planned);
                break;
            }
        }
        Ok(())
    }

    // ---- sessions

    fn session(&mut self, k: usize, now: u64) -> Result<()> {
        let next = ((k + 1) * self.session_slots) as u64 * self.slot;
        if next < self.end_us {
            self.push(next, Ev::Session(k + 1));
        }
        if self.kind == SchedulerKind::Temporal {
            let base = k * self.session_slots;
            for &(a, _) in &self.slices.clone() {
                let t = (base + a) as u64 * self.slot;
                if t > now && t < self.end_us {
                    self.push(t, Ev::Slice);
                }
            }
            return self.temporal_try(now);
        }
        if k > 0 {
            self.board.advance_session();
        }
        if self.plan_dirty {
            self.rebuild_plan()?;
            self.plan_dirty = false;
        }
        if k == 0 {
            self.materialize(0);
        }
        self.materialize(k + 1);
        self.fill(now)
    }

    fn materialize(&mut self, k: usize) {
        let Some(plan) = self.plan.take() else {
            return;
        };
        let base = k * self.session_slots;
        for r in &plan.runs {
            let st = base + r.start_slot;
            if st + r.slots > self.horizon {
                continue;
            }
            let i = self.index(&r.model);
            if self.resv[i].contains_key(&st) || !self.gpu.committed.fits(st, r.slots, r.gpu_pct) {
                continue;
            }
            self.gpu.committed.add(st, r.slots, r.gpu_pct);
            self.resv[i].insert(
                st,
                Resv {
                    slots: r.slots,
                    pct: r.gpu_pct,
                },
            );
            self.push(st as u64 * self.slot, Ev::Planned(i, st));
        }
        self.plan = Some(plan);
    }

    fn planned(&mut self, i: usize, s: usize, now: u64) -> Result<()> {
        let Some(r) = self.resv[i].remove(&s) else {
            return Ok(());
        };
        let inst = &self.gpu.instances[i];
        if now >= self.end_us {
            self.gpu.committed.remove(s, r.slots, r.pct);
            return Ok(());
        }
        if !inst.available_at(now) {
            let ns = inst.unavailable_until.div_ceil(self.slot) as usize;
            self.gpu.committed.remove(s, (ns - s).min(r.slots), r.pct);
            if ns < s + r.slots {
                let rest = Resv {
                    slots: s + r.slots - ns,
                    pct: r.pct,
                };
                self.resv[i].insert(ns, rest);
                self.push(ns as u64 * self.slot, Ev::Planned(i, ns));
            }
            return Ok(());
        }
        if self.m[i].busy_at(now) || self.m[i].fill.is_some() {
            self.gpu.committed.remove(s, r.slots, r.pct);
            return Ok(());
        }
        self.purge(i, now);
        let cap = (self.m[i].queue.len() as u32).min(self.m[i].max_batch);
        match self.pick_batch(i, r.pct, cap, r.slots)? {
            None => self.gpu.committed.remove(s, r.slots, r.pct),
            Some((b, lat)) => {
                let len = self.slots_of(lat);
                self.gpu.committed.remove(s + len, r.slots - len, r.pct);
                self.start_run(i, now, r.pct, b, lat, RunKind::Planned);
            }
        }
        self.fill(now)
    }

    // ---- opportunistic fill

    fn fill(&mut self, now: u64) -> Result<()> {
        let s = now.div_ceil(self.slot) as usize;
        if s >= self.horizon {
            return Ok(());
        }
        let start_us = s as u64 * self.slot;
        let mut cands = Vec::new();
        for i in 0..self.m.len() {
            if self.m[i].fill.is_some() || self.m[i].busy_at(start_us) || !self.gpu.instances[i].available_at(start_us)
            {
                continue;
            }
            self.purge(i, now);
            let m = &self.m[i];
            let q = m.queue.len() as u32;
            if q == 0 {
                continue;
            }
            let next = self.resv[i].range(s..).next().map(|(&st, r)| (st, st + r.slots));
            if next.is_some_and(|(st, _)| st == s) {
                continue;
            }
            let cap = q.min(m.max_batch);
            let pct = self.gpu.instances[i].gpu_pct;
            let deadline = m.queue[0] + m.slo_us;
            let guard = (m.slo_us as f64 * FILL_GUARD) as u64;
            let l_cap = self.lat_us(i, pct, cap)?;
            let at_risk = next.is_none_or(|(_, e)| e as u64 * self.slot > deadline);
            let ready = q >= m.max_batch || (at_risk && start_us + l_cap + guard >= deadline);
            if !ready {
                if at_risk {
                    let wake = deadline - l_cap - guard;
                    if wake > now && self.m[i].wake_at.is_none_or(|w| wake < w || w <= now) {
                        self.m[i].wake_at = Some(wake);
                        self.push(wake, Ev::Wake(i));
                    }
                }
                continue;
            }
            // an urgent request takes whatever grid share is left rather than waiting
            let free = ((100.0 - self.gpu.committed.at(s) + 1e-9) / 10.0).floor() * 10.0;
            let pct = if at_risk && free < pct && free >= 10.0 {
                free
            } else {
                pct
            };
            let options = (1..=cap)
                .map(|b| Ok((b, self.lat_us(i, pct, b)? as f64 / 1000.0)))
                .collect::<Result<Vec<_>>>()?;
            cands.push((
                i,
                FillCandidate {
                    name: self.m[i].name.clone(),
                    knee_pct: pct,
                    options,
                    next_planned: next.map(|x| x.0),
                },
            ));
        }
        if cands.is_empty() {
            return Ok(());
        }
        let (idx, cands): (Vec<usize>, Vec<FillCandidate>) = cands.into_iter().unzip();
        for r in dynamic_fill(&mut self.gpu.committed, &self.board, &cands, s, self.horizon) {
            let i = idx[cands.iter().position(|c| c.name == r.model).expect("granted candidate")];
            self.m[i].fill = Some(Fill {
                inst_pct: self.gpu.instances[i].gpu_pct,
                start: s,
                slots: r.slots,
                pct: r.gpu_pct,
                batch: r.batch,
            });
            self.push(start_us, Ev::FillStart(i));
        }
        Ok(())
    }

    fn fill_start(&mut self, i: usize, now: u64) -> Result<()> {
        let Some(f) = self.m[i].fill.take() else {
            return Ok(());
        };
        let usable = now < self.end_us
            && !self.m[i].busy_at(now)
            && self.gpu.instances[i].available_at(now)
            && self.gpu.instances[i].gpu_pct == f.inst_pct;
        self.purge(i, now);
        let cap = (self.m[i].queue.len() as u32).min(f.batch);
        let pick = if usable {
            self.pick_batch(i, f.pct, cap, f.slots)?
        } else {
            None
        };
        match pick {
            None => self.gpu.committed.remove(f.start, f.slots, f.pct),
            Some((b, lat)) => {
                let len = self.slots_of(lat);
                self.gpu.committed.remove(f.start + len, f.slots - len, f.pct);
                self.start_run(i, now, f.pct, b, lat, RunKind::Fill);
            }
        }
        self.fill(now)
    }

    // ---- reconfiguration

    fn reconfig(&mut self, k: usize, now: u64) -> Result<()> {
        let e = self.reconf[k].clone();
        let i = self.index(&e.model);
        if matches!(self.kind, SchedulerKind::StaticSpatial | SchedulerKind::WmaxMin) {
            let others: f64 = self
                .gpu
                .instances
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, x)| x.gpu_pct.max(x.pending.map_or(0.0, |p| p.new_gpu_pct)))
                .sum();
            if others + e.new_gpu_pct > 100.0 + 1e-9 {
                return Err(Error::Reconfiguration(format!(
                    "model {}: {}% does not fit beside {others}% of static partitions",
                    e.model, e.new_gpu_pct
                )));
            }
        }
        if apply_reconfiguration(&mut self.gpu, &e.model, e.new_gpu_pct, e.mode, now, self.load_us)? {
            self.push(now + self.load_us, Ev::ReconfigReady(i));
        }
        Ok(())
    }

    fn reconfig_ready(&mut self, i: usize, now: u64) -> Result<()> {
        let busy_until = self.m[i].running.as_ref().map_or(now, |(e, _)| *e);
        let from = self.gpu.instances[i].gpu_pct;
        let pending = self.gpu.instances[i].pending;
        let Some((pct, ready)) = complete_reconfiguration(&mut self.gpu, i, now, busy_until, self.switch_us) else {
            return Ok(());
        };
        if let Some(p) = pending {
            self.records.push(ReconfigRecord {
                gpu: self.gpu_idx,
                model: self.m[i].name.clone(),
                requested_us: p.requested_us,
                effective_us: ready,
                from_pct: from,
                to_pct: pct,
                mode: p.mode,
            });
        }
        if self.kind == SchedulerKind::Dstack {
            let old = std::mem::take(&mut self.resv[i]);
            for (st, r) in &old {
                self.gpu.committed.remove(*st, r.slots, r.pct);
            }
            for (st, mut r) in old {
                if self.gpu.committed.fits(st, r.slots, pct) {
                    self.gpu.committed.add(st, r.slots, pct);
                    r.pct = pct;
                    self.resv[i].insert(st, r);
                }
            }
            self.plan_dirty = true;
        }
        self.push(ready, Ev::Wake(i));
        Ok(())
    }
}
