//! Forward passes over a primal/shuffled pair (training) and a single image
//! (inference).

use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, normalized_equivariant_loss, total_loss_on_tape, LossBreakdown,
};
use crate::maps::{conv_head, couple, gap_logits, normalize_map, select_class, tokens_to_featmap};
use crate::matching::{
    across_transformer, cost_matrix_on_tape, refine, sinkhorn_on_tape, staircase, to_distribution,
    DiscreteDistribution, SinkhornConfig, StaircaseConfig, TransportPlan,
};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{encode, final_norm, EncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub use_matching: bool,
    pub use_across: bool,
    pub staircase: StaircaseConfig,
    pub sinkhorn: SinkhornConfig,
    pub lambda: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            use_matching: true,
            use_across: false,
            staircase: StaircaseConfig::new(1.0).expect("positive scale"),
            sinkhorn: SinkhornConfig::default(),
            lambda: 0.5,
        }
    }
}

/// Constant quantities derived from the activation maps: the normalized
/// semantic maps used as regression targets and the transport marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub m_p: Tensor,
    pub m_h: Tensor,
    pub source: DiscreteDistribution,
    pub target: DiscreteDistribution,
}

#[derive(Debug, Clone)]
pub struct PairForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub targets: Targets,
    pub plan: Option<TransportPlan>,
}

struct Branch {
    f_prime: Var,
    logits: Var,
    m: Tensor,
}

fn branch(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    image: &Tensor,
    label: usize,
) -> Result<Branch> {
    let enc = encode(tape, params, cfg, image)?;
    let g = cfg.grid();
    let tokens = final_norm(tape, params, enc.patch_tokens)?;
    let f = tokens_to_featmap(tape, tokens, g, g)?;
    let f_prime = conv_head(tape, params, f)?;
    let s = enc.attention.inner_guided()?;
    let m_hat = couple(tape.value(f_prime), &s)?;
    let m = normalize_map(&select_class(&m_hat, label)?);
    let logits = gap_logits(tape, f_prime)?;
    Ok(Branch { f_prime, logits, m })
}

/// Runs both branches, the matching module when enabled, and the losses.
/// `shuffled = None` means the pair is (primal, primal) and the encoder runs
/// once. `frozen` replaces the targets computed from this pass, which keeps
/// the loss a smooth function of the parameters for finite differences.
#[allow(clippy::too_many_arguments)]
pub fn pair_forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    opts: &PipelineOptions,
    primal: &Tensor,
    shuffled: Option<&Tensor>,
    label: usize,
    frozen: Option<&Targets>,
) -> Result<PairForward> {
    if label >= cfg.num_classes {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let p = branch(tape, params, cfg, primal, label)?;
    let h = match shuffled {
        Some(img) => branch(tape, params, cfg, img, label)?,
        None => Branch {
            f_prime: p.f_prime,
            logits: p.logits,
            m: p.m.clone(),
        },
    };
    let targets = match frozen {
        Some(t) => t.clone(),
        None => Targets {
            source: to_distribution(&staircase(&p.m, &opts.staircase))?,
            target: to_distribution(&staircase(&h.m, &opts.staircase))?,
            m_p: p.m,
            m_h: h.m,
        },
    };

    let (l_cls, l_er, parts, plan) = if opts.use_matching {
        let (o_p, o_h) = across_transformer(
            tape,
            params,
            cfg.across_heads,
            p.f_prime,
            h.f_prime,
            opts.use_across,
        )?;
        let gamma = cost_matrix_on_tape(tape, o_p, o_h)?;
        let (flow, plan) = sinkhorn_on_tape(
            tape,
            gamma,
            &targets.source,
            &targets.target,
            &opts.sinkhorn,
        )?;
        let (t_p, t_h) = refine(tape, o_p, o_h, flow)?;
        let lt_p = gap_logits(tape, t_p)?;
        let lt_h = gap_logits(tape, t_h)?;
        let (l_cls, parts) =
            classification_loss(tape, (p.logits, h.logits), Some((lt_p, lt_h)), label)?;
        let l_er = normalized_equivariant_loss(tape, t_p, t_h, &targets.m_p, &targets.m_h, label)?;
        (l_cls, Some(l_er), parts, Some(plan))
    } else {
        let (l_cls, parts) = classification_loss(tape, (p.logits, h.logits), None, label)?;
        (l_cls, None, parts, None)
    };
    let loss = total_loss_on_tape(tape, l_cls, l_er, opts.lambda)?;
    let breakdown = LossBreakdown {
        l_cls: tape.value(l_cls).item()?,
        l_er: match l_er {
            Some(v) => tape.value(v).item()?,
            None => 0.0,
        },
        l_total: tape.value(loss).item()?,
        ce_f_p: parts[0].unwrap_or(f64::NAN),
        ce_f_h: parts[1].unwrap_or(f64::NAN),
        ce_t_p: parts[2],
        ce_t_h: parts[3],
    };
    Ok(PairForward {
        loss,
        breakdown,
        targets,
        plan,
    })
}

/// Single-image prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Tensor,
    /// Class indices, most likely first.
    pub ranked: Vec<usize>,
    /// `c x h x w` semantic-constrained activation maps.
    pub m_hat: Tensor,
    pub inner_guided: Tensor,
}

impl Inference {
    pub fn top1(&self) -> usize {
        self.ranked[0]
    }
}

/// Encodes the primal image without shuffling. With `use_across`, the
/// activation maps pass through the across-transformer as the pair
/// (primal, primal) before coupling; the logits always come from `F'`.
pub fn infer(params: &ModelParams, image: &Tensor, use_across: bool) -> Result<Inference> {
    let cfg = params.config();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = encode(&mut tape, &bound, cfg, image)?;
    let g = cfg.grid();
    let tokens = final_norm(&mut tape, &bound, enc.patch_tokens)?;
    let f = tokens_to_featmap(&mut tape, tokens, g, g)?;
    let f_prime = conv_head(&mut tape, &bound, f)?;
    let logits = gap_logits(&mut tape, f_prime)?;
    let activation = if use_across {
        across_transformer(&mut tape, &bound, cfg.across_heads, f_prime, f_prime, true)?.0
    } else {
        f_prime
    };
    let s = enc.attention.inner_guided()?;
    let m_hat = couple(tape.value(activation), &s)?;
    let logits = tape.value(logits).clone();
    let mut ranked: Vec<usize> = (0..logits.numel()).collect();
    ranked.sort_by(|&a, &b| {
        logits.data()[b]
            .total_cmp(&logits.data()[a])
            .then(a.cmp(&b))
    });
    Ok(Inference {
        logits,
        ranked,
        m_hat,
        inner_guided: s,
    })
}
