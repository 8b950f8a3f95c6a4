//! Per-layer prompts fused with lexicon and label knowledge, plus ablation variants.
//!
//! Both banks are projected into the encoder space, attend over their keys
//! (text rows for the context half, pooled label descriptions for the label
//! half), take a residual readout and pass through a tanh gate:
//!
//! ```text
//! p̂ = p W^p + b^p        ê = e W + b
//! U = softmax(p̂ · ê)     q̂ = p̂ + Σ U ê      q = tanh(q̂ Ŵ + b̂)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::SememeWeighting;
use crate::substrate::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const BANK_X: &str = "prompt.px";
pub const BANK_C: &str = "prompt.pc";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Tkdp,
    TkdpMinusSk,
    TkdpMinusLk,
    TkdpMinusCk,
    Dpt,
    PromptTuning,
    PrefixTuning,
    Discrete,
}

impl PromptMode {
    pub const ALL: [PromptMode; 8] = [
        PromptMode::Tkdp,
        PromptMode::TkdpMinusSk,
        PromptMode::TkdpMinusLk,
        PromptMode::TkdpMinusCk,
        PromptMode::Dpt,
        PromptMode::PromptTuning,
        PromptMode::PrefixTuning,
        PromptMode::Discrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Tkdp => "tkdp",
            PromptMode::TkdpMinusSk => "tkdp_minus_sk",
            PromptMode::TkdpMinusLk => "tkdp_minus_lk",
            PromptMode::TkdpMinusCk => "tkdp_minus_ck",
            PromptMode::Dpt => "dpt",
            PromptMode::PromptTuning => "prompt_tuning",
            PromptMode::PrefixTuning => "prefix_tuning",
            PromptMode::Discrete => "discrete",
        }
    }

    pub fn switches(self) -> FusionSwitches {
        let all = FusionSwitches::all();
        match self {
            PromptMode::Tkdp | PromptMode::PromptTuning | PromptMode::PrefixTuning | PromptMode::Discrete => all,
            PromptMode::TkdpMinusSk => FusionSwitches { sememes: false, ..all },
            PromptMode::TkdpMinusLk => FusionSwitches {
                label_attention: false,
                ..all
            },
            PromptMode::TkdpMinusCk => FusionSwitches {
                context_attention: false,
                ..all
            },
            PromptMode::Dpt => FusionSwitches::none(),
        }
    }

    pub fn placement(self) -> Placement {
        match self {
            PromptMode::PromptTuning => Placement::FirstLayer,
            PromptMode::PrefixTuning | PromptMode::Discrete => Placement::Replicated,
            _ => Placement::EveryLayer,
        }
    }

    /// Whether a trainable prompt bank exists for this mode.
    pub fn uses_bank(self) -> bool {
        self != PromptMode::Discrete
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = PromptMode::ALL.iter().map(|m| m.name()).collect();
            Error::Invalid(format!(
                "unknown prompt mode `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// Which knowledge paths are active when building prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSwitches {
    /// Feed sememe-enhanced `E` instead of `H` into the fusion.
    pub sememes: bool,
    pub context_attention: bool,
    pub label_attention: bool,
    /// Apply the bank projection and the tanh gate.
    pub project_and_gate: bool,
}

impl FusionSwitches {
    pub fn all() -> Self {
        FusionSwitches {
            sememes: true,
            context_attention: true,
            label_attention: true,
            project_and_gate: true,
        }
    }

    pub fn none() -> Self {
        FusionSwitches {
            sememes: false,
            context_attention: false,
            label_attention: false,
            project_and_gate: false,
        }
    }
}

/// Which encoder layers receive a prompt block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Layer `i` gets slice `i` of `Q`.
    EveryLayer,
    /// Only the first layer gets a prompt.
    FirstLayer,
    /// Slice 0 is fed to every layer.
    Replicated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub l_p: usize,
    pub sememe_weighting: SememeWeighting,
    /// One `W^p` for both banks; `false` gives each bank its own projection.
    pub share_prompt_projection: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: PromptMode::Tkdp,
            l_p: 4,
            sememe_weighting: SememeWeighting::Distance,
            share_prompt_projection: true,
        }
    }
}

/// Trainable `Pˣ`, `Pᶜ`, each `l_p x n_p x d_h`.
#[derive(Debug, Clone, Copy)]
pub struct PromptBank {
    pub px: ParamId,
    pub pc: ParamId,
}

impl PromptBank {
    pub fn register(store: &mut ParamStore, l_p: usize, n_p: usize, d_h: usize) -> Result<Self> {
        Ok(PromptBank {
            px: store.add_normal(BANK_X, &[l_p, n_p, d_h], PROMPT_INIT_STD, true)?,
            pc: store.add_normal(BANK_C, &[l_p, n_p, d_h], PROMPT_INIT_STD, true)?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(PromptBank {
            px: store.id(BANK_X)?,
            pc: store.id(BANK_C)?,
        })
    }
}

pub type Affine = (ParamId, ParamId);

/// Affine maps used by the fusion. `proj_x` and `proj_c` hold the same ids
/// when the projection is shared.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub proj_x: Option<Affine>,
    pub proj_c: Option<Affine>,
    pub embed_x: Affine,
    pub embed_c: Affine,
    pub gate_x: Option<Affine>,
    pub gate_c: Option<Affine>,
}

fn add_affine(store: &mut ParamStore, name: &str, d: usize) -> Result<Affine> {
    Ok((
        store.add_normal(&format!("{name}.w"), &[d, d], 1.0 / (d as f64).sqrt(), true)?,
        store.add(&format!("{name}.b"), Tensor::zeros(&[d]), true)?,
    ))
}

fn find_affine(store: &ParamStore, name: &str) -> Result<Affine> {
    Ok((store.id(&format!("{name}.w"))?, store.id(&format!("{name}.b"))?))
}

fn affine_names(shared: bool) -> (&'static str, &'static str) {
    if shared {
        ("fusion.proj", "fusion.proj")
    } else {
        ("fusion.proj_x", "fusion.proj_c")
    }
}

impl FusionParams {
    /// Registers the maps needed by `mode`, or nothing for modes that use raw prompts.
    pub fn register(store: &mut ParamStore, mode: PromptMode, shared: bool, d: usize) -> Result<Option<Self>> {
        if mode == PromptMode::Dpt {
            return Ok(None);
        }
        let embed_x = add_affine(store, "fusion.embed_x", d)?;
        let embed_c = add_affine(store, "fusion.embed_c", d)?;
        if !mode.uses_bank() {
            return Ok(Some(FusionParams {
                proj_x: None,
                proj_c: None,
                embed_x,
                embed_c,
                gate_x: None,
                gate_c: None,
            }));
        }
        let (nx, nc) = affine_names(shared);
        let proj_x = add_affine(store, nx, d)?;
        let proj_c = if shared { proj_x } else { add_affine(store, nc, d)? };
        Ok(Some(FusionParams {
            proj_x: Some(proj_x),
            proj_c: Some(proj_c),
            embed_x,
            embed_c,
            gate_x: Some(add_affine(store, "fusion.gate_x", d)?),
            gate_c: Some(add_affine(store, "fusion.gate_c", d)?),
        }))
    }

    pub fn from_store(store: &ParamStore, mode: PromptMode, shared: bool) -> Result<Option<Self>> {
        if mode == PromptMode::Dpt {
            return Ok(None);
        }
        let embed_x = find_affine(store, "fusion.embed_x")?;
        let embed_c = find_affine(store, "fusion.embed_c")?;
        if !mode.uses_bank() {
            return Ok(Some(FusionParams {
                proj_x: None,
                proj_c: None,
                embed_x,
                embed_c,
                gate_x: None,
                gate_c: None,
            }));
        }
        let (nx, nc) = affine_names(shared);
        Ok(Some(FusionParams {
            proj_x: Some(find_affine(store, nx)?),
            proj_c: Some(find_affine(store, nc)?),
            embed_x,
            embed_c,
            gate_x: Some(find_affine(store, "fusion.gate_x")?),
            gate_c: Some(find_affine(store, "fusion.gate_c")?),
        }))
    }
}

/// `x W + b` over the last axis.
pub fn apply_affine(g: &mut Graph, store: &ParamStore, x: Var, (w, b): Affine) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add(y, bv)
}

/// Row-softmax of `queries · keysᵀ` (`r x d` by `k x d` → `r x k`), with
/// masked keys at exactly zero.
pub fn attend(g: &mut Graph, queries: Var, keys: Var, key_mask: Option<&Tensor>) -> Result<Var> {
    if let Some(m) = key_mask {
        if m.data().iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid("attention over an all-masked key set".into()));
        }
    }
    let kt = g.transpose(keys)?;
    let scores = g.matmul(queries, kt)?;
    g.softmax(scores, 1, key_mask)
}

/// Mean of `Ê^C` (`L x l x d`) over unmasked description words, giving `L x d`.
pub fn pool_labels(g: &mut Graph, e_c: Var, mask: &Tensor) -> Result<Var> {
    g.mean_pool(e_c, 1, Some(mask))
}

/// `q̂ = p̂ + U ê`, then `tanh(q̂ Ŵ + b̂)` when a gate is given.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    p_hat: Var,
    attention: Option<(Var, Var)>,
    gate: Option<Affine>,
) -> Result<Var> {
    let q_hat = match attention {
        Some((u, keys)) => {
            let readout = g.matmul(u, keys)?;
            g.add(p_hat, readout)?
        }
        None => p_hat,
    };
    match gate {
        Some(aff) => {
            let z = apply_affine(g, store, q_hat, aff)?;
            g.tanh(z)
        }
        None => Ok(q_hat),
    }
}

/// Label-side state, computed once per graph and shared by every sentence.
#[derive(Debug, Clone)]
pub struct LabelState {
    /// Pooled `Êᶜ`, `L x d_h` (absent for raw-prompt modes).
    pub pooled: Option<Var>,
    /// `Qᶜ` as `l_p x n_p x d_h` (bank modes) or `l_p x d_h` (discrete).
    pub half: Option<Var>,
    /// Label attention `Uᶜ`, `(l_p * n_p) x L`.
    pub attention: Option<Var>,
}

/// Prompt blocks for one sentence.
#[derive(Debug, Clone)]
pub struct Prompts {
    /// `Q`, `2l_p x n_p x d_h`; `None` when `l_p = 0`.
    pub q: Option<Var>,
    /// Block fed to each encoder layer, `2l_p x d_h`.
    pub layers: Vec<Option<Var>>,
    /// Context attention `Uˣ`, `(l_p * n_p) x n`, row `j * n_p + i` for prompt `j` at depth `i`.
    pub context_attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct PromptGenerator {
    pub mode: PromptMode,
    pub switches: FusionSwitches,
    pub l_p: usize,
    pub n_p: usize,
    pub d_h: usize,
    pub bank: Option<PromptBank>,
    pub fusion: Option<FusionParams>,
}

impl PromptGenerator {
    pub fn register(store: &mut ParamStore, cfg: &PromptConfig, n_p: usize, d_h: usize) -> Result<Self> {
        let active = cfg.l_p > 0;
        let bank = if active && cfg.mode.uses_bank() {
            Some(PromptBank::register(store, cfg.l_p, n_p, d_h)?)
        } else {
            None
        };
        let fusion = if active {
            FusionParams::register(store, cfg.mode, cfg.share_prompt_projection, d_h)?
        } else {
            None
        };
        Ok(PromptGenerator {
            mode: cfg.mode,
            switches: cfg.mode.switches(),
            l_p: cfg.l_p,
            n_p,
            d_h,
            bank,
            fusion,
        })
    }

    pub fn from_store(store: &ParamStore, cfg: &PromptConfig, n_p: usize, d_h: usize) -> Result<Self> {
        let active = cfg.l_p > 0;
        Ok(PromptGenerator {
            mode: cfg.mode,
            switches: cfg.mode.switches(),
            l_p: cfg.l_p,
            n_p,
            d_h,
            bank: if active && cfg.mode.uses_bank() {
                Some(PromptBank::from_store(store)?)
            } else {
                None
            },
            fusion: if active {
                FusionParams::from_store(store, cfg.mode, cfg.share_prompt_projection)?
            } else {
                None
            },
        })
    }

    /// Replaces the mode-derived switches. Paths whose parameters were not
    /// registered stay off.
    pub fn with_switches(mut self, switches: FusionSwitches) -> Self {
        self.switches = switches;
        self
    }

    fn fusion(&self) -> Result<&FusionParams> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("mode {} has no fusion parameters", self.mode)))
    }

    fn projected_bank(&self, g: &mut Graph, store: &ParamStore, bank: ParamId, proj: Option<Affine>) -> Result<Var> {
        let p = g.param(store, bank);
        let p = g.reshape(p, &[self.l_p * self.n_p, self.d_h])?;
        match proj {
            Some(aff) if self.switches.project_and_gate => apply_affine(g, store, p, aff),
            _ => Ok(p),
        }
    }

    /// Builds the label half from `E^C` (or `H^C` when sememes are off).
    pub fn prepare_labels(&self, g: &mut Graph, store: &ParamStore, e_c: Var, mask: &Tensor) -> Result<LabelState> {
        if self.l_p == 0 {
            return Ok(LabelState {
                pooled: None,
                half: None,
                attention: None,
            });
        }
        let needs_keys = !self.mode.uses_bank() || self.switches.label_attention;
        let pooled = match (needs_keys, self.fusion.as_ref()) {
            (true, Some(f)) => {
                let e_hat = apply_affine(g, store, e_c, f.embed_c)?;
                Some(pool_labels(g, e_hat, mask)?)
            }
            _ => None,
        };
        let Some(bank) = self.bank else {
            let pooled = pooled.ok_or_else(|| Error::Invalid("discrete prompts need label keys".into()))?;
            return Ok(LabelState {
                pooled: Some(pooled),
                half: Some(fit_rows(g, pooled, self.l_p)?),
                attention: None,
            });
        };
        let proj = self.fusion.as_ref().and_then(|f| f.proj_c);
        let p_hat = self.projected_bank(g, store, bank.pc, proj)?;
        let mut attention = None;
        let readout = match pooled {
            Some(keys) if self.switches.label_attention => {
                let u = attend(g, p_hat, keys, None)?;
                attention = Some(u);
                Some((u, keys))
            }
            _ => None,
        };
        let gate = if self.switches.project_and_gate {
            self.fusion.as_ref().and_then(|f| f.gate_c)
        } else {
            None
        };
        let q = fuse(g, store, p_hat, readout, gate)?;
        Ok(LabelState {
            pooled,
            half: Some(g.reshape(q, &[self.l_p, self.n_p, self.d_h])?),
            attention,
        })
    }

    /// Builds `Q` for one sentence from `Eˣ` (or `Hˣ`) and the shared label state.
    pub fn build_prompts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        labels: &LabelState,
        e_x: Var,
        text_mask: &Tensor,
    ) -> Result<Prompts> {
        if self.l_p == 0 {
            return Ok(Prompts {
                q: None,
                layers: vec![None; self.n_p],
                context_attention: None,
            });
        }
        let label_half = labels
            .half
            .ok_or_else(|| Error::Invalid("label state was prepared for another configuration".into()))?;
        let Some(bank) = self.bank else {
            let f = self.fusion()?;
            let e_hat = apply_affine(g, store, e_x, f.embed_x)?;
            let ctx = fit_rows(g, e_hat, self.l_p)?;
            let block = g.concat(&[ctx, label_half], 0)?;
            return self.place_flat(g, block);
        };
        let proj = self.fusion.as_ref().and_then(|f| f.proj_x);
        let p_hat = self.projected_bank(g, store, bank.px, proj)?;
        let mut context_attention = None;
        let readout = match self.fusion.as_ref() {
            Some(f) if self.switches.context_attention => {
                let keys = apply_affine(g, store, e_x, f.embed_x)?;
                let u = attend(g, p_hat, keys, Some(text_mask))?;
                context_attention = Some(u);
                Some((u, keys))
            }
            _ => None,
        };
        let gate = if self.switches.project_and_gate {
            self.fusion.as_ref().and_then(|f| f.gate_x)
        } else {
            None
        };
        let qx = fuse(g, store, p_hat, readout, gate)?;
        let qx = g.reshape(qx, &[self.l_p, self.n_p, self.d_h])?;
        let q = g.concat(&[qx, label_half], 0)?;
        let mut out = self.place(g, q)?;
        out.context_attention = context_attention;
        Ok(out)
    }

    fn layer_slice(&self, g: &mut Graph, q: Var, i: usize) -> Result<Var> {
        let s = g.slice(q, 1, i, i + 1)?;
        g.reshape(s, &[2 * self.l_p, self.d_h])
    }

    fn place(&self, g: &mut Graph, q: Var) -> Result<Prompts> {
        let (q, layers) = match self.mode.placement() {
            Placement::EveryLayer => {
                let layers = (0..self.n_p)
                    .map(|i| self.layer_slice(g, q, i).map(Some))
                    .collect::<Result<_>>()?;
                (q, layers)
            }
            Placement::FirstLayer => {
                let first = self.layer_slice(g, q, 0)?;
                let mut layers = vec![None; self.n_p];
                layers[0] = Some(first);
                (q, layers)
            }
            Placement::Replicated => {
                let first = self.layer_slice(g, q, 0)?;
                return self.place_flat(g, first);
            }
        };
        Ok(Prompts {
            q: Some(q),
            layers,
            context_attention: None,
        })
    }

    /// Uses one `2l_p x d_h` block at every layer.
    fn place_flat(&self, g: &mut Graph, block: Var) -> Result<Prompts> {
        let slab = g.reshape(block, &[2 * self.l_p, 1, self.d_h])?;
        let q = g.concat(&vec![slab; self.n_p], 1)?;
        Ok(Prompts {
            q: Some(q),
            layers: vec![Some(block); self.n_p],
            context_attention: None,
        })
    }
}

/// First `rows` rows of an `n x d` matrix, zero-padded when `n < rows`.
fn fit_rows(g: &mut Graph, x: Var, rows: usize) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    if n >= rows {
        g.slice(x, 0, 0, rows)
    } else {
        let pad = g.input(Tensor::zeros(&[rows - n, d]));
        g.concat(&[x, pad], 0)
    }
}
