//! Cost accounting and architecture search.
//!
//! The per-block search enumerates every kernel-size combination, evaluates
//! each on a fixed batch fixture, and picks the cheapest candidate whose
//! distillation loss stays within `r` times the loss of the teacher-shaped
//! baseline. Ties on cost fall to the lower loss; remaining ties keep the
//! earlier candidate in lexicographic order (smaller kernels first).
//!
//! A global evolutionary search over whole-network architectures, driven by
//! summed variance-normalized losses, is included as the comparison baseline.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Session, Tensor};
use crate::unet::{
    forward_block, layout, sample_random_path, teacher_arch, BlockArch, BlockSpec, Kernel,
    SubnetArch, Supernet, TeacherFeatures, UNetConfig,
};

// ---- cost model ------------------------------------------------------------

/// Multiply-accumulate count of one same-padding convolution.
pub fn macs_of_conv(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    (h as u64) * (w as u64) * (c_in as u64) * (c_out as u64) * (k as u64) * (k as u64)
}

/// Parameter count of one convolution (weights plus bias).
pub fn params_of_conv(c_in: usize, c_out: usize, k: usize) -> u64 {
    (c_out as u64) * (c_in as u64) * (k as u64) * (k as u64) + c_out as u64
}

/// MACs of one block under the given kernel choices, including the block's
/// non-searchable convolutions (stem, head, channel-matching shortcuts).
fn block_macs(config: &UNetConfig, spec: &BlockSpec, arch: &BlockArch) -> u64 {
    let r = spec.resolution;
    let mut macs = 0u64;
    if spec.has_stem {
        macs += macs_of_conv(r, r, config.image_channels, config.channels_at(0), 3);
    }
    for (layer, &k) in spec.layers.iter().zip(arch.choices()) {
        macs += macs_of_conv(r, r, layer.c_in, layer.c_out, k.size());
        if layer.c_in != layer.c_out {
            macs += macs_of_conv(r, r, layer.c_in, layer.c_out, 1);
        }
    }
    if spec.has_head {
        macs += macs_of_conv(r, r, config.channels_at(0), config.image_channels, 3);
    }
    macs
}

fn block_params(config: &UNetConfig, spec: &BlockSpec, arch: &BlockArch) -> u64 {
    let mut params = 0u64;
    if spec.has_stem {
        params += params_of_conv(config.image_channels, config.channels_at(0), 3);
    }
    for (layer, &k) in spec.layers.iter().zip(arch.choices()) {
        params += params_of_conv(layer.c_in, layer.c_out, k.size());
        if layer.c_in != layer.c_out {
            params += params_of_conv(layer.c_in, layer.c_out, 1);
        }
    }
    if spec.has_head {
        params += params_of_conv(config.channels_at(0), config.image_channels, 3);
    }
    params
}

/// Per-block and total convolution cost of an architecture (per sample).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub per_block_macs: Vec<u64>,
    /// Convolution cost outside every block; zero in this layout, where all
    /// transitions are parameter-free.
    pub fixed_macs: u64,
    pub total_macs: u64,
    pub total_params: u64,
}

impl CostReport {
    /// 100 * (1 - self/reference), rounded to the nearest integer.
    pub fn reduction_percent_vs(&self, reference: &CostReport) -> i64 {
        reduction_percent(self.total_macs as f64, reference.total_macs as f64)
    }
}

pub fn reduction_percent(value: f64, reference: f64) -> i64 {
    (100.0 * (1.0 - value / reference)).round() as i64
}

/// Formats a giga-MAC value with its reduction against a reference, e.g.
/// "4.18(-31%)"; the reference itself formats without a suffix.
pub fn format_macs_reduction(value_g: f64, reference_g: f64) -> String {
    let pct = reduction_percent(value_g, reference_g);
    if pct > 0 {
        format!("{value_g:.2}(-{pct}%)")
    } else if pct < 0 {
        format!("{value_g:.2}(+{}%)", -pct)
    } else {
        format!("{value_g:.2}")
    }
}

pub fn cost_of_arch(config: &UNetConfig, arch: &SubnetArch) -> Result<CostReport> {
    let blocks = layout(config)?;
    if arch.blocks().len() != blocks.len() {
        return Err(CoreError::Contract(format!(
            "arch has {} blocks, network has {}",
            arch.blocks().len(),
            blocks.len()
        )));
    }
    let per_block_macs: Vec<u64> = blocks
        .iter()
        .zip(arch.blocks())
        .map(|(spec, a)| block_macs(config, spec, a))
        .collect();
    let total_params = blocks
        .iter()
        .zip(arch.blocks())
        .map(|(spec, a)| block_params(config, spec, a))
        .sum();
    let fixed_macs = 0;
    let total_macs = per_block_macs.iter().sum::<u64>() + fixed_macs;
    Ok(CostReport {
        per_block_macs,
        fixed_macs,
        total_macs,
        total_params,
    })
}

// ---- block evaluation ------------------------------------------------------

/// Captures the fixed evaluation batches every candidate is scored on.
pub fn capture_search_fixture(
    teacher: &crate::unet::UNet,
    data: &mut dyn crate::unet::BatchSource,
    sched: &crate::diffusion::NoiseSchedule,
    eval_batches: usize,
    batch_size: usize,
    eval_seed: u64,
) -> Result<Vec<TeacherFeatures>> {
    let mut rng = Rng::stream(eval_seed, "search-eval");
    (0..eval_batches)
        .map(|_| {
            let x0 = data.next_batch(batch_size)?;
            crate::unet::teacher_capture(teacher, &x0, &mut rng, sched)
        })
        .collect()
}

/// Mean distillation loss of one candidate over the fixture batches.
pub fn eval_block_on_fixture(
    supernet: &Supernet,
    block: usize,
    arch: &BlockArch,
    fixture: &[TeacherFeatures],
) -> Result<f64> {
    if fixture.is_empty() {
        return Err(CoreError::Contract("empty evaluation fixture".into()));
    }
    let mut total = 0.0;
    for feats in fixture {
        let mut sess = Session::new(false);
        let x = sess.tape.leaf(feats.x[block].clone());
        let y = sess.tape.leaf(feats.y[block].clone());
        let emb = sess.tape.leaf(feats.t_emb.clone());
        let silu_emb = sess.tape.silu(emb);
        let y_hat = forward_block(supernet, &mut sess, block, arch, x, silu_emb)?;
        let l = sess.tape.mse_mean(y_hat, y)?;
        total += sess.tape.scalar_value(l)?.to_f64();
    }
    Ok(total / fixture.len() as f64)
}

// ---- constrained selection (the per-block search) ---------------------------

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Relaxation coefficient on the baseline loss; must be >= 1.
    pub r: f64,
    pub eval_batches: usize,
    pub eval_seed: u64,
    /// Refuse to enumerate blocks with more candidates than this.
    pub enumeration_cap: usize,
    /// When false the middle block keeps the teacher architecture.
    pub search_middle: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            r: 1.0,
            eval_batches: 4,
            eval_seed: 0,
            enumeration_cap: 6561,
            search_middle: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1.0 {
            return Err(CoreError::Configuration(format!(
                "relaxation coefficient r = {} must be >= 1",
                self.r
            )));
        }
        if self.eval_batches == 0 {
            return Err(CoreError::Configuration("eval_batches must be >= 1".into()));
        }
        Ok(())
    }
}

/// All kernel combinations for a block, lexicographic with smaller kernels
/// first: (1,1..), (1,..,3), ... (5,..,5).
pub fn enumerate_block_archs(layers: usize) -> Vec<BlockArch> {
    let mut out = Vec::with_capacity(3usize.pow(layers as u32));
    let mut idx = vec![0usize; layers];
    loop {
        out.push(BlockArch::new(idx.iter().map(|&i| Kernel::ALL[i]).collect()));
        // odometer, last layer fastest
        let mut pos = layers;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < 3 {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// One scored candidate.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub arch: BlockArch,
    pub loss: f64,
    pub cost: u64,
    pub satisfied: bool,
}

/// Applies the constrained-minimum rule to an already-evaluated table, in
/// table order: minimize cost subject to loss <= r * base_loss; equal cost
/// falls to the lower loss; remaining ties keep the earlier entry.
pub fn select_from_table(table: &[CandidateEval], base_loss: f64, r: f64) -> Option<usize> {
    let threshold = r * base_loss;
    let mut best: Option<usize> = None;
    let mut cost_min = u64::MAX;
    let mut loss_min = f64::INFINITY;
    for (i, cand) in table.iter().enumerate() {
        if cand.loss <= threshold {
            if cand.cost < cost_min {
                cost_min = cand.cost;
                loss_min = cand.loss;
                best = Some(i);
            } else if cand.cost == cost_min && cand.loss < loss_min {
                loss_min = cand.loss;
                best = Some(i);
            }
        }
    }
    best
}

/// Audit trail of one block's search.
#[derive(Debug, Clone)]
pub struct BlockSearchAudit {
    pub block: usize,
    pub base_loss: f64,
    pub r: f64,
    pub candidates: Vec<CandidateEval>,
    pub selected: BlockArch,
    pub selected_loss: f64,
    pub selected_cost: u64,
}

/// Exhaustive constrained search over one block.
pub fn search_block(
    supernet: &Supernet,
    block: usize,
    fixture: &[TeacherFeatures],
    config: &SearchConfig,
) -> Result<(BlockArch, BlockSearchAudit)> {
    config.validate()?;
    let d = supernet.config.layers_per_block;
    let candidate_count = 3usize.pow(d as u32);
    if candidate_count > config.enumeration_cap {
        return Err(CoreError::Configuration(format!(
            "block {block} has {candidate_count} candidates, above the cap of {}; \
             reduce layers_per_block",
            config.enumeration_cap
        )));
    }
    let specs = layout(&supernet.config)?;
    let spec = &specs[block];
    let base_arch = BlockArch::uniform(Kernel::K3, d);

    let mut table = Vec::with_capacity(candidate_count);
    for arch in enumerate_block_archs(d) {
        let loss = eval_block_on_fixture(supernet, block, &arch, fixture)?;
        let cost = block_macs(&supernet.config, spec, &arch);
        table.push(CandidateEval {
            arch,
            loss,
            cost,
            satisfied: false,
        });
    }
    let base_loss = table
        .iter()
        .find(|c| c.arch == base_arch)
        .expect("enumeration contains the base architecture")
        .loss;
    let threshold = config.r * base_loss;
    for cand in &mut table {
        cand.satisfied = cand.loss <= threshold;
    }
    let chosen = select_from_table(&table, base_loss, config.r)
        .expect("base architecture always satisfies the constraint at r >= 1");
    let selected = table[chosen].arch.clone();
    let audit = BlockSearchAudit {
        block,
        base_loss,
        r: config.r,
        selected: selected.clone(),
        selected_loss: table[chosen].loss,
        selected_cost: table[chosen].cost,
        candidates: table,
    };
    Ok((selected, audit))
}

/// Summary row of one block's outcome.
#[derive(Debug, Clone)]
pub struct BlockSearchSummary {
    pub block: usize,
    pub base_loss: f64,
    pub selected_loss: f64,
    pub selected_cost: u64,
    pub candidates_evaluated: usize,
}

/// The selected subnet with its per-block audit trail.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub arch: SubnetArch,
    pub r: f64,
    pub per_block: Vec<BlockSearchSummary>,
    pub audits: Vec<BlockSearchAudit>,
}

/// Runs the per-block search on every block independently and concatenates
/// the winners.
pub fn search_all(
    supernet: &Supernet,
    fixture: &[TeacherFeatures],
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let base = teacher_arch(&supernet.config);
    let block_count = supernet.config.block_count();
    let middle = supernet.config.levels;
    let mut blocks = Vec::with_capacity(block_count);
    let mut per_block = Vec::with_capacity(block_count);
    let mut audits = Vec::with_capacity(block_count);
    for i in 0..block_count {
        if i == middle && !config.search_middle {
            let arch = base.block(i).clone();
            let loss = eval_block_on_fixture(supernet, i, &arch, fixture)?;
            let specs = layout(&supernet.config)?;
            let cost = block_macs(&supernet.config, &specs[i], &arch);
            per_block.push(BlockSearchSummary {
                block: i,
                base_loss: loss,
                selected_loss: loss,
                selected_cost: cost,
                candidates_evaluated: 1,
            });
            audits.push(BlockSearchAudit {
                block: i,
                base_loss: loss,
                r: config.r,
                candidates: vec![CandidateEval {
                    arch: arch.clone(),
                    loss,
                    cost,
                    satisfied: true,
                }],
                selected: arch.clone(),
                selected_loss: loss,
                selected_cost: cost,
            });
            blocks.push(arch);
            continue;
        }
        let (arch, audit) = search_block(supernet, i, fixture, config)?;
        per_block.push(BlockSearchSummary {
            block: i,
            base_loss: audit.base_loss,
            selected_loss: audit.selected_loss,
            selected_cost: audit.selected_cost,
            candidates_evaluated: audit.candidates.len(),
        });
        audits.push(audit);
        blocks.push(arch);
    }
    Ok(SearchResult {
        arch: SubnetArch::from_blocks(blocks),
        r: config.r,
        per_block,
        audits,
    })
}

// ---- variance-normalized loss (global-search baseline) ----------------------

/// Mean-squared error divided by the population variance of the target.
pub fn relative_l2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Dimension(format!(
            "relative_l2 needs equal shapes, got {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = target.numel() as f64;
    let mean: f64 = target.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = target
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 1e-12 {
        return Err(CoreError::DegenerateTarget(format!(
            "target variance {var} below tolerance"
        )));
    }
    let mse: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(mse / var)
}

// ---- evolutionary global baseline -------------------------------------------

/// A landscape the global search can query: per-block variance-normalized
/// losses and block costs. Implementations may memoize.
pub trait BlockLossLandscape {
    fn block_count(&self) -> usize;
    fn layers_per_block(&self) -> usize;
    fn block_cost(&self, block: usize, arch: &BlockArch) -> u64;
    fn block_rel_loss(&mut self, block: usize, arch: &BlockArch) -> Result<f64>;

    fn total_cost(&self, arch: &SubnetArch) -> u64 {
        (0..self.block_count())
            .map(|i| self.block_cost(i, arch.block(i)))
            .sum()
    }

    fn total_rel_loss(&mut self, arch: &SubnetArch) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.block_count() {
            sum += self.block_rel_loss(i, arch.block(i))?;
        }
        Ok(sum)
    }
}

/// Landscape backed by a trained supernet and a capture fixture; relative
/// losses are computed per batch and averaged.
pub struct SupernetLandscape<'a> {
    pub supernet: &'a Supernet,
    pub fixture: &'a [TeacherFeatures],
    cache: HashMap<(usize, BlockArch), f64>,
}

impl<'a> SupernetLandscape<'a> {
    pub fn new(supernet: &'a Supernet, fixture: &'a [TeacherFeatures]) -> Self {
        SupernetLandscape {
            supernet,
            fixture,
            cache: HashMap::new(),
        }
    }
}

impl BlockLossLandscape for SupernetLandscape<'_> {
    fn block_count(&self) -> usize {
        self.supernet.config.block_count()
    }

    fn layers_per_block(&self) -> usize {
        self.supernet.config.layers_per_block
    }

    fn block_cost(&self, block: usize, arch: &BlockArch) -> u64 {
        let specs = layout(&self.supernet.config).expect("validated config");
        block_macs(&self.supernet.config, &specs[block], arch)
    }

    fn block_rel_loss(&mut self, block: usize, arch: &BlockArch) -> Result<f64> {
        if let Some(&v) = self.cache.get(&(block, arch.clone())) {
            return Ok(v);
        }
        let mut total = 0.0;
        for feats in self.fixture {
            let mut sess = Session::new(false);
            let x = sess.tape.leaf(feats.x[block].clone());
            let emb = sess.tape.leaf(feats.t_emb.clone());
            let silu_emb = sess.tape.silu(emb);
            let y_hat = forward_block(self.supernet, &mut sess, block, arch, x, silu_emb)?;
            total += relative_l2(&sess.tape.to_tensor(y_hat), &feats.y[block])?;
        }
        let v = total / self.fixture.len() as f64;
        self.cache.insert((block, arch.clone()), v);
        Ok(v)
    }
}

/// Synthetic landscape over explicit loss tables; block cost is a per-block
/// weight times the sum of squared kernel sizes.
pub struct TableLandscape {
    pub layers: usize,
    pub losses: Vec<HashMap<BlockArch, f64>>,
    pub cost_weights: Vec<u64>,
}

impl BlockLossLandscape for TableLandscape {
    fn block_count(&self) -> usize {
        self.losses.len()
    }

    fn layers_per_block(&self) -> usize {
        self.layers
    }

    fn block_cost(&self, block: usize, arch: &BlockArch) -> u64 {
        let ksum: u64 = arch.choices().iter().map(|k| (k.size() * k.size()) as u64).sum();
        self.cost_weights[block] * ksum
    }

    fn block_rel_loss(&mut self, block: usize, arch: &BlockArch) -> Result<f64> {
        self.losses[block]
            .get(arch)
            .copied()
            .ok_or_else(|| CoreError::Contract(format!("no loss entry for {arch:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionConfig {
    pub generations: usize,
    pub population: usize,
    /// Per-layer gene mutation probability.
    pub mutation_prob: f64,
    pub tournament: usize,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            generations: 30,
            population: 32,
            mutation_prob: 0.1,
            tournament: 4,
            elitism: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionOutcome {
    pub best: SubnetArch,
    pub best_cost: u64,
    pub best_rel_loss: f64,
    pub base_rel_loss: f64,
    /// Per-block relative losses of the base architecture; exposes the
    /// cross-block magnitude imbalance the summed objective suffers from.
    pub per_block_base_rel: Vec<f64>,
}

/// Whole-network evolutionary search under the summed relative-loss
/// constraint. The base (teacher-shaped) architecture seeds the population,
/// so a feasible individual always exists; with zero generations the base is
/// returned unchanged.
pub fn evolutionary_global_search(
    land: &mut dyn BlockLossLandscape,
    cfg: &EvolutionConfig,
) -> Result<EvolutionOutcome> {
    let blocks = land.block_count();
    let layers = land.layers_per_block();
    let base = SubnetArch::from_blocks(vec![
        BlockArch::uniform(Kernel::K3, layers);
        blocks
    ]);
    let base_rel_loss = land.total_rel_loss(&base)?;
    let per_block_base_rel: Vec<f64> = (0..blocks)
        .map(|i| land.block_rel_loss(i, base.block(i)))
        .collect::<Result<_>>()?;
    let base_cost = land.total_cost(&base);
    let penalty = 1e3 * base_cost as f64;

    let mut rng = Rng::stream(cfg.seed, "evolution");
    let mut best = base.clone();
    let mut best_cost = base_cost;
    let mut best_rel = base_rel_loss;

    let mut population: Vec<SubnetArch> = Vec::with_capacity(cfg.population);
    population.push(base.clone());
    while population.len() < cfg.population {
        population.push(SubnetArch::from_blocks(
            (0..blocks).map(|_| BlockArch::sample(layers, &mut rng)).collect(),
        ));
    }

    let fitness = |land: &mut dyn BlockLossLandscape,
                       arch: &SubnetArch|
     -> Result<(f64, u64, f64)> {
        let cost = land.total_cost(arch);
        let rel = land.total_rel_loss(arch)?;
        let excess = (rel - base_rel_loss).max(0.0);
        Ok((cost as f64 + penalty * excess, cost, rel))
    };

    for _gen in 0..cfg.generations {
        let mut scored: Vec<(f64, u64, f64)> = Vec::with_capacity(population.len());
        for ind in &population {
            let s = fitness(land, ind)?;
            scored.push(s);
        }
        for (ind, &(_, cost, rel)) in population.iter().zip(scored.iter()) {
            let feasible = rel <= base_rel_loss;
            if feasible && (cost < best_cost || (cost == best_cost && rel < best_rel)) {
                best = ind.clone();
                best_cost = cost;
                best_rel = rel;
            }
        }
        // Elites carry over by fitness rank.
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
        let mut next: Vec<SubnetArch> = order
            .iter()
            .take(cfg.elitism.min(population.len()))
            .map(|&i| population[i].clone())
            .collect();
        let tournament = |rng: &mut Rng, scored: &[(f64, u64, f64)]| -> usize {
            let mut bi = rng.below(scored.len());
            for _ in 1..cfg.tournament {
                let c = rng.below(scored.len());
                if scored[c].0 < scored[bi].0 {
                    bi = c;
                }
            }
            bi
        };
        while next.len() < cfg.population {
            let pa = &population[tournament(&mut rng, &scored)];
            let pb = &population[tournament(&mut rng, &scored)];
            // Uniform crossover per layer gene, then pointwise mutation.
            let child_blocks: Vec<BlockArch> = (0..blocks)
                .map(|bi| {
                    let genes: Vec<Kernel> = (0..layers)
                        .map(|li| {
                            let mut g = if rng.uniform() < 0.5 {
                                pa.block(bi).choices()[li]
                            } else {
                                pb.block(bi).choices()[li]
                            };
                            if rng.uniform() < cfg.mutation_prob {
                                g = Kernel::ALL[rng.below(3)];
                            }
                            g
                        })
                        .collect();
                    BlockArch::new(genes)
                })
                .collect();
            next.push(SubnetArch::from_blocks(child_blocks));
        }
        population = next;
    }

    Ok(EvolutionOutcome {
        best,
        best_cost,
        best_rel_loss: best_rel,
        base_rel_loss,
        per_block_base_rel,
    })
}

// ---- random cost-matched baseline -------------------------------------------

/// Rejection-samples uniform architectures until one lands within
/// `tolerance_percent` of the target MAC count.
pub fn random_arch_matching_cost(
    config: &UNetConfig,
    target_macs: u64,
    tolerance_percent: f64,
    rng: &mut Rng,
) -> Result<SubnetArch> {
    let tol = target_macs as f64 * tolerance_percent / 100.0;
    for _ in 0..10_000 {
        let arch = sample_random_path(config, rng);
        let cost = cost_of_arch(config, &arch)?.total_macs;
        if (cost as f64 - target_macs as f64).abs() <= tol {
            return Ok(arch);
        }
    }
    Err(CoreError::Infeasible(format!(
        "no architecture within {tolerance_percent}% of {target_macs} MACs after 10000 draws"
    )))
}
