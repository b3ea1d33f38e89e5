//! Cross-modal correlation objectives: cosine-distance triplet hinges over
//! identity and phonetic embeddings, and the marginal audio-vs-visual
//! discriminator game.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{self, Op};
use crate::nn::{sigmoid, silu, silu_backward, Dense, Parameters};
use crate::real::Real;

/// Floor applied inside both logarithms of the adversarial value.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainWeights {
    pub margin: f64,
    pub lambda_corr: f64,
    pub lambda_adv: f64,
}

impl Default for TrainWeights {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lambda_corr: 0.1,
            lambda_adv: 0.05,
        }
    }
}

impl TrainWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.lambda_corr >= 0.0) || !(self.lambda_adv >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "weights need margin > 0 and non-negative lambdas, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_dims<T>(u: &ArrayView1<T>, v: &ArrayView1<T>, what: &'static str) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            what,
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(())
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance<T: Real>(u: &ArrayView1<T>, v: &ArrayView1<T>) -> Result<T> {
    Ok(cosine_distance_grad(u, v)?.0)
}

/// Cosine distance and its gradients with respect to both arguments.
pub fn cosine_distance_grad<T: Real>(u: &ArrayView1<T>, v: &ArrayView1<T>) -> Result<(T, Array1<T>, Array1<T>)> {
    check_dims(u, v, "cosine distance")?;
    let (nu, nv) = (u.dot(u).sqrt(), v.dot(v).sqrt());
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroNorm("cosine distance"));
    }
    let c = u.dot(v) / (nu * nv);
    let c_clamped = c.max(-T::one()).min(T::one());
    // d(1 - c)/du = -(v / (|u||v|) - c u / |u|^2)
    let mut du = u.mapv(|x| c * x / (nu * nu));
    du.scaled_add(-T::one() / (nu * nv), v);
    let mut dv = v.mapv(|x| c * x / (nv * nv));
    dv.scaled_add(-T::one() / (nu * nv), u);
    Ok((T::one() - c_clamped, du, dv))
}

/// Value and gradients of one triplet hinge.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad<T> {
    pub value: T,
    pub d_pos: T,
    pub d_neg: T,
    pub anchor: Array1<T>,
    pub positive: Array1<T>,
    pub negative: Array1<T>,
}

/// `max{d(a, p) - d(a, n) + margin, 0}` with gradients; gradients vanish
/// whenever the hinge is inactive.
pub fn triplet_loss_grad<T: Real>(
    anchor: &ArrayView1<T>,
    positive: &ArrayView1<T>,
    negative: &ArrayView1<T>,
    margin: T,
) -> Result<TripletGrad<T>> {
    let (dp, ga_p, gp) = cosine_distance_grad(anchor, positive)?;
    let (dn, ga_n, gn) = cosine_distance_grad(anchor, negative)?;
    let raw = dp - dn + margin;
    if raw > T::zero() {
        Ok(TripletGrad {
            value: raw,
            d_pos: dp,
            d_neg: dn,
            anchor: ga_p - ga_n,
            positive: gp,
            negative: -gn,
        })
    } else {
        let z = Array1::zeros(anchor.len());
        Ok(TripletGrad {
            value: T::zero(),
            d_pos: dp,
            d_neg: dn,
            anchor: z.clone(),
            positive: z.clone(),
            negative: z,
        })
    }
}

/// Identity hinge: audio identity of the separated target as anchor,
/// visual identities of the target speaker and of another speaker.
pub fn identity_triplet_loss<T: Real>(
    i_a_anchor: &ArrayView1<T>,
    i_v_pos: &ArrayView1<T>,
    i_v_neg: &ArrayView1<T>,
    margin: T,
) -> Result<T> {
    Ok(triplet_loss_grad(i_a_anchor, i_v_pos, i_v_neg, margin)?.value)
}

/// Phonetic hinge over time-pooled phonetic embeddings.
pub fn phonetic_triplet_loss<T: Real>(
    p_a: &ArrayView1<T>,
    p_v_pos: &ArrayView1<T>,
    p_v_neg: &ArrayView1<T>,
    margin: T,
) -> Result<T> {
    Ok(triplet_loss_grad(p_a, p_v_pos, p_v_neg, margin)?.value)
}

pub fn combined_correlation_loss<T: Real>(l1: T, l2: T) -> T {
    l1 + l2
}

/// One-hidden-layer classifier over an embedding; output is the
/// probability that the embedding came from the visual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Dense<T>,
    pub out: Dense<T>,
}

pub struct MlpPass<T> {
    pre: Array2<T>,
    h: Array2<T>,
    pub prob: Array1<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::new(input, hidden, rng),
            out: Dense::new(hidden, 1, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            hidden: Dense::zeros(input, hidden),
            out: Dense::zeros(hidden, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    /// Row-wise probabilities for a batch of embeddings.
    pub fn forward(&self, x: &ArrayView2<T>) -> Result<MlpPass<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "discriminator input",
                left: x.ncols(),
                right: self.input_dim(),
            });
        }
        instrument::record(Op::Discriminator);
        let pre = self.hidden.forward(x);
        let h = pre.mapv(silu);
        let prob = self.out.forward(&h.view()).column(0).mapv(sigmoid);
        Ok(MlpPass { pre, h, prob })
    }

    pub fn prob(&self, x: &ArrayView1<T>) -> Result<T> {
        Ok(self.forward(&x.insert_axis(Axis(0)))?.prob[0])
    }

    /// Backpropagates `dlogit` (gradient on the pre-sigmoid output per row).
    pub fn backward(&self, x: &ArrayView2<T>, pass: &MlpPass<T>, dlogit: &Array1<T>, grad: Option<&mut Mlp<T>>) -> Array2<T> {
        let dz = dlogit.view().insert_axis(Axis(1)).to_owned();
        let (gh, go) = match grad {
            Some(g) => (Some(&mut g.hidden), Some(&mut g.out)),
            None => (None, None),
        };
        let mut dh = self.out.backward(&pass.h.view(), &dz, go, true).expect("requested");
        Zip::from(&mut dh).and(&pass.pre).for_each(|g, &p| *g = silu_backward(p, *g));
        self.hidden.backward(x, &dh, gh, true).expect("requested")
    }
}

impl<T: Real> Parameters<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        self.hidden.visit("hidden", f);
        self.out.visit("out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.hidden.visit_mut("hidden", f);
        self.out.visit_mut("out", f);
    }
}

/// Identity and phonetic discriminators.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub identity: Mlp<T>,
    pub phonetic: Mlp<T>,
}

impl<T: Real> DiscriminatorParams<T> {
    pub fn new<R: Rng + ?Sized>(d_id: usize, d_ph: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            identity: Mlp::new(d_id, hidden, rng),
            phonetic: Mlp::new(d_ph, hidden, rng),
        }
    }

    pub fn zeros(d_id: usize, d_ph: usize, hidden: usize) -> Self {
        Self {
            identity: Mlp::zeros(d_id, hidden),
            phonetic: Mlp::zeros(d_ph, hidden),
        }
    }

    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint<T> {
        let meta = serde_json::json!({
            "d_id": self.identity.input_dim(),
            "d_ph": self.phonetic.input_dim(),
            "hidden": self.identity.hidden.output_dim(),
        });
        let mut ck = crate::checkpoint::Checkpoint::new("discriminator", meta);
        ck.push_params("", self);
        ck
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint<T>) -> Result<Self> {
        let dim = |k: &str| {
            ck.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{k}`")))
        };
        let mut d = Self::zeros(dim("d_id")?, dim("d_ph")?, dim("hidden")?);
        ck.load_params("", &mut d)?;
        Ok(d)
    }
}

impl<T: Real> Parameters<T> for DiscriminatorParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<T>)) {
        self.identity.hidden.visit("identity.hidden", f);
        self.identity.out.visit("identity.out", f);
        self.phonetic.hidden.visit("phonetic.hidden", f);
        self.phonetic.out.visit("phonetic.out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.identity.hidden.visit_mut("identity.hidden", f);
        self.identity.out.visit_mut("identity.out", f);
        self.phonetic.hidden.visit_mut("phonetic.hidden", f);
        self.phonetic.out.visit_mut("phonetic.out", f);
    }
}

fn clamped_ln<T: Real>(p: T) -> (T, bool) {
    let floor = T::lit(LOG_FLOOR);
    if p > floor {
        (p.ln(), false)
    } else {
        (floor.ln(), true)
    }
}

/// `E_visual log D(x) + E_audio log(1 - D(x))` with both logs floored.
pub fn adversarial_value<T: Real>(d: &Mlp<T>, visual: &ArrayView2<T>, audio: &ArrayView2<T>) -> Result<T> {
    Ok(adversarial_value_grad(d, visual, audio, false)?.value)
}

/// Adversarial value with gradients for the discriminator parameters and
/// both embedding batches.
#[derive(Debug, Clone)]
pub struct AdversarialGrad<T> {
    pub value: T,
    pub params: Option<Mlp<T>>,
    pub visual: Array2<T>,
    pub audio: Array2<T>,
}

pub fn adversarial_value_grad<T: Real>(
    d: &Mlp<T>,
    visual: &ArrayView2<T>,
    audio: &ArrayView2<T>,
    param_grad: bool,
) -> Result<AdversarialGrad<T>> {
    if visual.nrows() == 0 {
        return Err(Error::EmptyBatch("adversarial visual batch"));
    }
    if audio.nrows() == 0 {
        return Err(Error::EmptyBatch("adversarial audio batch"));
    }
    let pv = d.forward(visual)?;
    let pa = d.forward(audio)?;
    let (nv, na) = (T::from_usize(visual.nrows()).unwrap(), T::from_usize(audio.nrows()).unwrap());
    let mut value = T::zero();
    // d log D / dz = 1 - D ; d log(1 - D) / dz = -D ; zero where floored
    let mut gv = Array1::zeros(visual.nrows());
    for (g, &p) in gv.iter_mut().zip(&pv.prob) {
        let (l, floored) = clamped_ln(p);
        value += l / nv;
        if !floored {
            *g = (T::one() - p) / nv;
        }
    }
    let mut ga = Array1::zeros(audio.nrows());
    for (g, &p) in ga.iter_mut().zip(&pa.prob) {
        let (l, floored) = clamped_ln(T::one() - p);
        value += l / na;
        if !floored {
            *g = -p / na;
        }
    }
    let mut pg = param_grad.then(|| {
        let mut z = d.clone();
        z.fill_zero();
        z
    });
    let dvis = d.backward(visual, &pv, &gv, pg.as_mut());
    let daud = d.backward(audio, &pa, &ga, pg.as_mut());
    Ok(AdversarialGrad {
        value,
        params: pg,
        visual: dvis,
        audio: daud,
    })
}

/// Generator-side term `mean log(1 - D(a))` over a batch of audio
/// embeddings, with its gradient on the embeddings.
pub fn generator_term<T: Real>(d: &Mlp<T>, audio: &ArrayView2<T>) -> Result<(T, Array2<T>)> {
    if audio.nrows() == 0 {
        return Err(Error::EmptyBatch("adversarial audio batch"));
    }
    let pa = d.forward(audio)?;
    let na = T::from_usize(audio.nrows()).unwrap();
    let mut value = T::zero();
    let mut ga = Array1::zeros(audio.nrows());
    for (g, &p) in ga.iter_mut().zip(&pa.prob) {
        let (l, floored) = clamped_ln(T::one() - p);
        value += l / na;
        if !floored {
            *g = -p / na;
        }
    }
    Ok((value, d.backward(audio, &pa, &ga, None)))
}
