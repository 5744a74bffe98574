//! The toy U-Net: deterministic construction, forward pass with attention
//! hooks, and a hand-written backward pass for training.

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention, attention_bwd, AttentionController, Pass};
use crate::error::{Error, Result};
use crate::nn::ops::{
    conv2d, conv2d_bwd, group_norm, group_norm_bwd, linear, linear_bwd, silu, silu_bwd,
    sinusoidal_embedding, upsample_nearest2, upsample_nearest2_bwd,
};
use crate::nn::{init_array, GradStore, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::schedule::Latent;

use super::{DenoiserConfig, LayerInfo, PromptEmbedding, PromptTokens, SpatialCondition};

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct GnP {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResP {
    gn1: GnP,
    conv1: ConvP,
    tproj: LinP,
    gn2: GnP,
    conv2: ConvP,
    skip: Option<ConvP>,
    cout: usize,
}

#[derive(Debug, Clone)]
struct AttnP {
    gn_sa: GnP,
    wq: LinP,
    wk: LinP,
    wv: LinP,
    wo: LinP,
    gn_ca: GnP,
    wq2: LinP,
    wk2: LinP,
    wv2: LinP,
    wo2: LinP,
    sa_index: usize,
    ca_index: usize,
}

#[derive(Debug, Clone)]
struct BlockP {
    res: ResP,
    attn: Option<AttnP>,
}

/// Forward-pass activations needed by [`Denoiser::backward`]. Cheap
/// intermediates (norm statistics, attention maps, FiLM coefficients) are
/// recomputed instead of stored.
pub struct UNetTape<F: Real> {
    time_sin: Array2<F>,
    time_l1_out: Array2<F>,
    time_silu_out: Array2<F>,
    temb_out: Array2<F>,
    tv: Array2<F>,
    conv_in_x: Array3<F>,
    enc: Vec<Vec<BlockTape<F>>>,
    downs_in: Vec<Array3<F>>,
    mid_rb1: ResTape<F>,
    mid_attn: Option<AttnTape<F>>,
    mid_rb2: ResTape<F>,
    dec: Vec<Vec<BlockTape<F>>>,
    ups_pre: Vec<Array3<F>>,
    ups_conv_in: Vec<Array3<F>>,
    out_gn_in: Array3<F>,
    out_silu_in: Array3<F>,
    out_conv_in: Array3<F>,
    token_ids: Vec<u32>,
    emb: Array2<F>,
}

struct ResTape<F> {
    x_in: Array3<F>,
    gn1_out: Array3<F>,
    silu1_out: Array3<F>,
    conv1_out: Array3<F>,
    gn2_out: Array3<F>,
    film_out: Array3<F>,
    silu2_out: Array3<F>,
}

struct AttnTape<F> {
    sa_x_in: Array3<F>,
    sa_tok: Array2<F>,
    q: Array3<F>,
    k: Array3<F>,
    v: Array3<F>,
    sa_merged: Array2<F>,
    ca_x_in: Array3<F>,
    ca_tok: Array2<F>,
    q2: Array3<F>,
    k2: Array3<F>,
    v2: Array3<F>,
    ca_merged: Array2<F>,
}

struct BlockTape<F> {
    res: ResTape<F>,
    attn: Option<AttnTape<F>>,
}

/// `[C, H, W]` feature map → `[H·W, C]` token matrix, row-major queries.
fn to_tokens<F: Real>(x: &Array3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut out = Array2::zeros((h * w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j, ci)] = x[(ci, i, j)];
            }
        }
    }
    out
}

fn from_tokens<F: Real>(t: &Array2<F>, h: usize, w: usize) -> Array3<F> {
    let c = t.dim().1;
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ci, i, j)] = t[(i * w + j, ci)];
            }
        }
    }
    out
}

fn split_heads<F: Real>(t: &Array2<F>, heads: usize) -> Array3<F> {
    let (n, c) = t.dim();
    let d = c / heads;
    let mut out = Array3::zeros((heads, n, d));
    for hh in 0..heads {
        for i in 0..n {
            for k in 0..d {
                out[(hh, i, k)] = t[(i, hh * d + k)];
            }
        }
    }
    out
}

fn merge_heads<F: Real>(a: &Array3<F>) -> Array2<F> {
    let (heads, n, d) = a.dim();
    let mut out = Array2::zeros((n, heads * d));
    for hh in 0..heads {
        for i in 0..n {
            for k in 0..d {
                out[(i, hh * d + k)] = a[(hh, i, k)];
            }
        }
    }
    out
}

type Hook<'s, 'l, F> = Option<(&'s mut (dyn AttentionController<F> + 'l), Pass)>;

/// The denoiser: configuration, flat parameter store, and the wiring of
/// blocks into the U-Net graph.
pub struct Denoiser<F: Real> {
    config: DenoiserConfig,
    params: ParamStore<F>,
    registry: Vec<LayerInfo>,
    conv_in: ConvP,
    time_l1: LinP,
    time_l2: LinP,
    token_table: ParamId,
    pos_table: ParamId,
    enc: Vec<Vec<BlockP>>,
    downs: Vec<ConvP>,
    mid_rb1: ResP,
    mid_attn: Option<AttnP>,
    mid_rb2: ResP,
    dec: Vec<Vec<BlockP>>,
    ups: Vec<ConvP>,
    out_gn: GnP,
    out_conv: ConvP,
    seed: u64,
}

struct Builder<'a, F: Real> {
    ps: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
    time_dim: usize,
}

impl<'a, F: Real> Builder<'a, F> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, stride: usize, zero: bool) -> ConvP {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in: cin * k * k }
        };
        let w = self
            .ps
            .add(format!("{name}.w"), init_array(&[cout, cin, k, k], init, &mut self.rng));
        let b = self
            .ps
            .add(format!("{name}.b"), init_array(&[cout], Init::Zeros, &mut self.rng));
        ConvP {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn lin(&mut self, name: &str, dout: usize, din: usize, zero: bool) -> LinP {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in: din }
        };
        let w = self
            .ps
            .add(format!("{name}.w"), init_array(&[dout, din], init, &mut self.rng));
        let b = self
            .ps
            .add(format!("{name}.b"), init_array(&[dout], Init::Zeros, &mut self.rng));
        LinP { w, b }
    }

    fn gn(&mut self, name: &str, c: usize) -> GnP {
        let g = self
            .ps
            .add(format!("{name}.g"), init_array(&[c], Init::Ones, &mut self.rng));
        let b = self
            .ps
            .add(format!("{name}.b"), init_array(&[c], Init::Zeros, &mut self.rng));
        GnP { g, b }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResP {
        let gn1 = self.gn(&format!("{name}.gn1"), cin);
        let conv1 = self.conv(&format!("{name}.conv1"), cout, cin, 3, 1, false);
        let tproj = self.lin(&format!("{name}.tproj"), 2 * cout, self.time_dim, true);
        let gn2 = self.gn(&format!("{name}.gn2"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cout, cin, 1, 1, false));
        ResP {
            gn1,
            conv1,
            tproj,
            gn2,
            conv2,
            skip,
            cout,
        }
    }

    fn attn(&mut self, name: &str, width: usize, ted: usize, sa_index: usize) -> AttnP {
        let gn_sa = self.gn(&format!("{name}.gn_sa"), width);
        let wq = self.lin(&format!("{name}.wq"), width, width, false);
        let wk = self.lin(&format!("{name}.wk"), width, width, false);
        let wv = self.lin(&format!("{name}.wv"), width, width, false);
        let wo = self.lin(&format!("{name}.wo"), width, width, true);
        let gn_ca = self.gn(&format!("{name}.gn_ca"), width);
        let wq2 = self.lin(&format!("{name}.wq2"), width, width, false);
        let wk2 = self.lin(&format!("{name}.wk2"), width, ted, false);
        let wv2 = self.lin(&format!("{name}.wv2"), width, ted, false);
        let wo2 = self.lin(&format!("{name}.wo2"), width, width, true);
        AttnP {
            gn_sa,
            wq,
            wk,
            wv,
            wo,
            gn_ca,
            wq2,
            wk2,
            wv2,
            wo2,
            sa_index,
            ca_index: sa_index + 1,
        }
    }
}

impl<F: Real> Denoiser<F> {
    /// Deterministic construction: a seed fully determines every parameter.
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let registry = config.registry();
        let mut params = ParamStore::new();
        let mut b = Builder {
            ps: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time_dim: config.time_embed_dim(),
        };
        let td = b.time_dim;
        let ted = config.token_embed_dim;

        let time_l1 = b.lin("time.l1", td, td, false);
        let time_l2 = b.lin("time.l2", td, td, false);
        let token_table = b.ps.add(
            "prompt.token_table",
            init_array(
                &[config.vocab_size, ted],
                Init::Normal { std: 0.02 },
                &mut b.rng,
            ),
        );
        let pos_table = b.ps.add(
            "prompt.pos_table",
            init_array(
                &[config.max_tokens, ted],
                Init::Normal { std: 0.02 },
                &mut b.rng,
            ),
        );
        let conv_in = b.conv("conv_in", config.width(0), config.in_channels, 3, 1, false);

        let levels = config.levels();
        let mut next_layer = 0usize;
        let mut enc = Vec::new();
        for li in 0..levels {
            let mut blocks = Vec::new();
            let cin0 = if li == 0 {
                config.width(0)
            } else {
                config.width(li - 1)
            };
            for bi in 0..config.blocks_per_level {
                let cin = if bi == 0 { cin0 } else { config.width(li) };
                let res = b.res(&format!("enc{li}.b{bi}.res"), cin, config.width(li));
                let attn = config.has_attention(li).then(|| {
                    let a = b.attn(
                        &format!("enc{li}.b{bi}.attn"),
                        config.width(li),
                        ted,
                        next_layer,
                    );
                    next_layer += 2;
                    a
                });
                blocks.push(BlockP { res, attn });
            }
            enc.push(blocks);
        }
        let mut downs = Vec::new();
        for li in 0..levels - 1 {
            downs.push(b.conv(&format!("down{li}"), config.width(li), config.width(li), 3, 2, false));
        }

        let deepest = levels - 1;
        let wd = config.width(deepest);
        let mid_rb1 = b.res("mid.rb1", wd, wd);
        let mid_attn = config.has_attention(deepest).then(|| {
            let a = b.attn("mid.attn", wd, ted, next_layer);
            next_layer += 2;
            a
        });
        let mid_rb2 = b.res("mid.rb2", wd, wd);

        let mut dec = Vec::new();
        for li in (0..levels).rev() {
            let mut blocks = Vec::new();
            let carried = if li == deepest {
                config.width(li)
            } else {
                config.width(li + 1)
            };
            for bi in 0..config.blocks_per_level {
                let cin = if bi == 0 {
                    carried + config.width(li)
                } else {
                    config.width(li)
                };
                let res = b.res(&format!("dec{li}.b{bi}.res"), cin, config.width(li));
                let attn = config.has_attention(li).then(|| {
                    let a = b.attn(
                        &format!("dec{li}.b{bi}.attn"),
                        config.width(li),
                        ted,
                        next_layer,
                    );
                    next_layer += 2;
                    a
                });
                blocks.push(BlockP { res, attn });
            }
            dec.push(blocks);
        }
        let mut ups = Vec::new();
        for li in (1..levels).rev() {
            ups.push(b.conv(&format!("up{li}"), config.width(li), config.width(li), 3, 1, false));
        }

        let out_gn = b.gn("out.gn", config.width(0));
        let out_conv = b.conv("out.conv", config.in_channels, config.width(0), 3, 1, true);

        debug_assert_eq!(next_layer, registry.len());
        Ok(Denoiser {
            config,
            params,
            registry,
            conv_in,
            time_l1,
            time_l2,
            token_table,
            pos_table,
            enc,
            downs,
            mid_rb1,
            mid_attn,
            mid_rb2,
            dec,
            ups,
            out_gn,
            out_conv,
            seed,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Global attention-layer registry in forward execution order.
    pub fn layer_registry(&self) -> &[LayerInfo] {
        &self.registry
    }

    /// Smallest attention-layer index in the decoder section.
    pub fn decoder_start(&self) -> Option<usize> {
        self.registry
            .iter()
            .find(|l| l.section == super::Section::Decoder)
            .map(|l| l.index)
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Resolutions accepting spatial-condition maps, with their channel
    /// counts (the width entering each encoder level).
    pub fn condition_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.config.resolution(0), self.config.width(0))];
        for li in 0..self.config.levels() - 1 {
            out.push((self.config.resolution(li + 1), self.config.width(li)));
        }
        out
    }

    /// Token lookup plus learned positional rows. Deterministic.
    pub fn embed_prompt(&self, tokens: &PromptTokens) -> Result<PromptEmbedding<F>> {
        let n = self.config.max_tokens;
        if tokens.ids.len() != n {
            return Err(Error::contract(format!(
                "prompt has {} tokens, model expects exactly {n} (padded)",
                tokens.ids.len()
            )));
        }
        let table = self.params.p2(self.token_table);
        let pos = self.params.p2(self.pos_table);
        let mut emb = Array2::zeros((n, self.config.token_embed_dim));
        for (i, &id) in tokens.ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::contract(format!(
                    "token id {id} out of vocabulary (size {})",
                    self.config.vocab_size
                )));
            }
            for c in 0..self.config.token_embed_dim {
                emb[(i, c)] = table[(id as usize, c)] + pos[(i, c)];
            }
        }
        Ok(PromptEmbedding {
            tokens: tokens.ids.clone(),
            emb,
        })
    }

    fn check_condition(&self, cond: &SpatialCondition<F>) -> Result<()> {
        let allowed = self.condition_shapes();
        for res in cond.resolutions() {
            let Some(&(_, ch)) = allowed.iter().find(|(r, _)| *r == res) else {
                return Err(Error::config(format!(
                    "condition resolution {res} has no matching encoder level (allowed: {allowed:?})"
                )));
            };
            let map = cond.at(res).unwrap();
            if map.dim() != (ch, res, res) {
                return Err(Error::config(format!(
                    "condition map at resolution {res} has shape {:?}, expected ({ch}, {res}, {res})",
                    map.dim()
                )));
            }
        }
        Ok(())
    }

    /// Predicted noise for a batch. A controller requires batch size 1
    /// (the pipeline runs the conditional and unconditional passes as
    /// separate calls tagged by [`Pass`]).
    pub fn forward(
        &self,
        x: &Latent<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
        mut ctrl: Hook<'_, '_, F>,
        cond: Option<&SpatialCondition<F>>,
    ) -> Result<Latent<F>> {
        let (bsz, c, h, w) = x.dim();
        if c != self.config.in_channels || h != self.config.image_size || w != self.config.image_size
        {
            return Err(Error::contract(format!(
                "input shape {:?} does not match model ({}, {}, {})",
                x.dim(),
                self.config.in_channels,
                self.config.image_size,
                self.config.image_size
            )));
        }
        if let Some((c, _)) = &ctrl {
            if bsz != 1 {
                return Err(Error::contract(
                    "attention controllers require batch size 1",
                ));
            }
            if let Some(n) = c.expected_layers() {
                if n != self.registry.len() {
                    return Err(Error::contract(format!(
                        "controller built for {n} attention layers, model has {}",
                        self.registry.len()
                    )));
                }
            }
        }
        if let Some(cond) = cond {
            self.check_condition(cond)?;
        }
        let mut out = Latent::zeros(x.raw_dim());
        if let Some((c, pass)) = ctrl.take() {
            let xi = x.index_axis(Axis(0), 0).to_owned();
            let (eps, _) = self.forward_inner(&xi, t, prompt, Some((c, pass)), cond, false)?;
            out.index_axis_mut(Axis(0), 0).assign(&eps);
        } else {
            for bi in 0..bsz {
                let xi = x.index_axis(Axis(0), bi).to_owned();
                let (eps, _) = self.forward_inner(&xi, t, prompt, None, cond, false)?;
                out.index_axis_mut(Axis(0), bi).assign(&eps);
            }
        }
        Ok(out)
    }

    /// Training forward for one sample; returns the prediction and the tape
    /// for [`Self::backward`].
    pub fn forward_train(
        &self,
        x: &Array3<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
    ) -> Result<(Array3<F>, UNetTape<F>)> {
        let (eps, tape) = self.forward_inner(x, t, prompt, None, None, true)?;
        Ok((eps, tape.expect("tape requested")))
    }

    fn res_forward(
        &self,
        p: &ResP,
        x: &Array3<F>,
        tv: &Array2<F>,
        record: bool,
    ) -> (Array3<F>, Option<ResTape<F>>) {
        let ps = &self.params;
        let groups = self.config.norm_groups();
        let gn1_out = group_norm(x, ps.p1(p.gn1.g), ps.p1(p.gn1.b), groups);
        let silu1_out = silu(&gn1_out);
        let conv1_out = conv2d(&silu1_out, ps.p4(p.conv1.w), ps.p1(p.conv1.b), 1, 1);
        let sb = linear(tv, ps.p2(p.tproj.w), ps.p1(p.tproj.b));
        let gn2_out = group_norm(&conv1_out, ps.p1(p.gn2.g), ps.p1(p.gn2.b), groups);
        let mut film_out = gn2_out.clone();
        for (ci, mut plane) in film_out.axis_iter_mut(Axis(0)).enumerate() {
            let scale = F::one() + sb[(0, ci)];
            let shift = sb[(0, p.cout + ci)];
            plane.mapv_inplace(|v| v * scale + shift);
        }
        let silu2_out = silu(&film_out);
        let conv2_out = conv2d(&silu2_out, ps.p4(p.conv2.w), ps.p1(p.conv2.b), 1, 1);
        let skipped = match &p.skip {
            Some(sc) => conv2d(x, ps.p4(sc.w), ps.p1(sc.b), 1, 0),
            None => x.clone(),
        };
        let y = skipped + &conv2_out;
        let tape = record.then(|| ResTape {
            x_in: x.clone(),
            gn1_out,
            silu1_out,
            conv1_out,
            gn2_out,
            film_out,
            silu2_out,
        });
        (y, tape)
    }

    fn res_backward(
        &self,
        p: &ResP,
        tape: &ResTape<F>,
        dy: &Array3<F>,
        tv: &Array2<F>,
        grads: &mut GradStore<F>,
        d_tv: &mut Array2<F>,
    ) -> Array3<F> {
        let ps = &self.params;
        let groups = self.config.norm_groups();
        // skip path
        let mut dx = match &p.skip {
            Some(sc) => {
                let (dxs, dws, dbs) = conv2d_bwd(&tape.x_in, ps.p4(sc.w), dy, 1, 0);
                grads.accum(sc.w, &dws);
                grads.accum(sc.b, &dbs);
                dxs
            }
            None => dy.clone(),
        };
        // main path
        let (d_silu2, dw2, db2) = conv2d_bwd(&tape.silu2_out, ps.p4(p.conv2.w), dy, 1, 1);
        grads.accum(p.conv2.w, &dw2);
        grads.accum(p.conv2.b, &db2);
        let d_film = silu_bwd(&tape.film_out, &d_silu2);
        // FiLM: y = g·(1+s) + b, with (s, b) = tproj(tv).
        let sb = linear(tv, ps.p2(p.tproj.w), ps.p1(p.tproj.b));
        let cout = p.cout;
        let mut d_gn2 = d_film.clone();
        let mut d_sb = Array2::zeros((1, 2 * cout));
        for ci in 0..cout {
            let scale = F::one() + sb[(0, ci)];
            let mut ds = F::zero();
            let mut dsh = F::zero();
            let g_plane = tape.gn2_out.index_axis(Axis(0), ci);
            let d_plane = d_film.index_axis(Axis(0), ci);
            for (gv, dv) in g_plane.iter().zip(d_plane.iter()) {
                ds += *dv * *gv;
                dsh += *dv;
            }
            d_sb[(0, ci)] = ds;
            d_sb[(0, cout + ci)] = dsh;
            d_gn2.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * scale);
        }
        let (d_tv_part, dwt, dbt) = linear_bwd(tv, ps.p2(p.tproj.w), &d_sb);
        grads.accum(p.tproj.w, &dwt);
        grads.accum(p.tproj.b, &dbt);
        *d_tv += &d_tv_part;
        let (d_conv1, dg2, dbn2) = group_norm_bwd(&tape.conv1_out, ps.p1(p.gn2.g), &d_gn2, groups);
        grads.accum(p.gn2.g, &dg2);
        grads.accum(p.gn2.b, &dbn2);
        let (d_silu1, dw1, db1) = conv2d_bwd(&tape.silu1_out, ps.p4(p.conv1.w), &d_conv1, 1, 1);
        grads.accum(p.conv1.w, &dw1);
        grads.accum(p.conv1.b, &db1);
        let d_gn1 = silu_bwd(&tape.gn1_out, &d_silu1);
        let (d_main, dg1, dbn1) = group_norm_bwd(&tape.x_in, ps.p1(p.gn1.g), &d_gn1, groups);
        grads.accum(p.gn1.g, &dg1);
        grads.accum(p.gn1.b, &dbn1);
        dx += &d_main;
        dx
    }

    fn attn_forward(
        &self,
        p: &AttnP,
        x: &Array3<F>,
        emb: &Array2<F>,
        ctrl: &mut Hook<'_, '_, F>,
        record: bool,
    ) -> Result<(Array3<F>, Option<AttnTape<F>>)> {
        let ps = &self.params;
        let groups = self.config.norm_groups();
        let heads = self.config.heads;
        let (_, hh, ww) = x.dim();

        // self-attention
        let sa_x_in = x;
        let gn_out = group_norm(sa_x_in, ps.p1(p.gn_sa.g), ps.p1(p.gn_sa.b), groups);
        let sa_tok = to_tokens(&gn_out);
        let q = split_heads(&linear(&sa_tok, ps.p2(p.wq.w), ps.p1(p.wq.b)), heads);
        let k = split_heads(&linear(&sa_tok, ps.p2(p.wk.w), ps.p1(p.wk.b)), heads);
        let v = split_heads(&linear(&sa_tok, ps.p2(p.wv.w), ps.p1(p.wv.b)), heads);
        let attn_out = match ctrl {
            Some((c, pass)) => c.self_attention(&self.registry[p.sa_index], *pass, &q, &k, &v)?,
            None => attention(&q, &k, &v)?.0,
        };
        let sa_merged = merge_heads(&attn_out);
        let o = linear(&sa_merged, ps.p2(p.wo.w), ps.p1(p.wo.b));
        let x1 = sa_x_in + &from_tokens(&o, hh, ww);

        // cross-attention
        let gn2_out = group_norm(&x1, ps.p1(p.gn_ca.g), ps.p1(p.gn_ca.b), groups);
        let ca_tok = to_tokens(&gn2_out);
        let q2 = split_heads(&linear(&ca_tok, ps.p2(p.wq2.w), ps.p1(p.wq2.b)), heads);
        let k2 = split_heads(&linear(emb, ps.p2(p.wk2.w), ps.p1(p.wk2.b)), heads);
        let v2 = split_heads(&linear(emb, ps.p2(p.wv2.w), ps.p1(p.wv2.b)), heads);
        let (attn2, map2) = attention(&q2, &k2, &v2)?;
        if let Some((c, pass)) = ctrl {
            c.observe_cross_map(&self.registry[p.ca_index], *pass, &map2)?;
        }
        let ca_merged = merge_heads(&attn2);
        let o2 = linear(&ca_merged, ps.p2(p.wo2.w), ps.p1(p.wo2.b));
        let x2 = &x1 + &from_tokens(&o2, hh, ww);

        let tape = record.then(|| AttnTape {
            sa_x_in: sa_x_in.clone(),
            sa_tok,
            q,
            k,
            v,
            sa_merged,
            ca_x_in: x1,
            ca_tok,
            q2,
            k2,
            v2,
            ca_merged,
        });
        Ok((x2, tape))
    }

    fn attn_backward(
        &self,
        p: &AttnP,
        tape: &AttnTape<F>,
        dy: &Array3<F>,
        emb: &Array2<F>,
        grads: &mut GradStore<F>,
        d_emb: &mut Array2<F>,
    ) -> Array3<F> {
        let ps = &self.params;
        let groups = self.config.norm_groups();
        let heads = self.config.heads;
        let (_, hh, ww) = dy.dim();

        // cross-attention: x2 = x1 + from_tokens(o2)
        let d_o2 = to_tokens(dy);
        let (d_ca_merged, dwo2, dbo2) = linear_bwd(&tape.ca_merged, ps.p2(p.wo2.w), &d_o2);
        grads.accum(p.wo2.w, &dwo2);
        grads.accum(p.wo2.b, &dbo2);
        let d_attn2 = split_heads(&d_ca_merged, heads);
        let (dq2, dk2, dv2) = attention_bwd(&tape.q2, &tape.k2, &tape.v2, &d_attn2);
        let (d_ca_tok, dwq2, dbq2) =
            linear_bwd(&tape.ca_tok, ps.p2(p.wq2.w), &merge_heads(&dq2));
        grads.accum(p.wq2.w, &dwq2);
        grads.accum(p.wq2.b, &dbq2);
        let (d_emb_k, dwk2, dbk2) = linear_bwd(emb, ps.p2(p.wk2.w), &merge_heads(&dk2));
        grads.accum(p.wk2.w, &dwk2);
        grads.accum(p.wk2.b, &dbk2);
        let (d_emb_v, dwv2, dbv2) = linear_bwd(emb, ps.p2(p.wv2.w), &merge_heads(&dv2));
        grads.accum(p.wv2.w, &dwv2);
        grads.accum(p.wv2.b, &dbv2);
        *d_emb += &d_emb_k;
        *d_emb += &d_emb_v;
        let d_gn_ca_out = from_tokens(&d_ca_tok, hh, ww);
        let (d_x1_norm, dgca, dbca) =
            group_norm_bwd(&tape.ca_x_in, ps.p1(p.gn_ca.g), &d_gn_ca_out, groups);
        grads.accum(p.gn_ca.g, &dgca);
        grads.accum(p.gn_ca.b, &dbca);
        let d_x1 = dy + &d_x1_norm;

        // self-attention: x1 = x + from_tokens(o)
        let d_o = to_tokens(&d_x1);
        let (d_sa_merged, dwo, dbo) = linear_bwd(&tape.sa_merged, ps.p2(p.wo.w), &d_o);
        grads.accum(p.wo.w, &dwo);
        grads.accum(p.wo.b, &dbo);
        let d_attn = split_heads(&d_sa_merged, heads);
        let (dq, dk, dv) = attention_bwd(&tape.q, &tape.k, &tape.v, &d_attn);
        let mut d_sa_tok = Array2::zeros(tape.sa_tok.raw_dim());
        for (lin_p, d_heads) in [(&p.wq, dq), (&p.wk, dk), (&p.wv, dv)] {
            let (d_tok, dw, db) = linear_bwd(&tape.sa_tok, ps.p2(lin_p.w), &merge_heads(&d_heads));
            grads.accum(lin_p.w, &dw);
            grads.accum(lin_p.b, &db);
            d_sa_tok += &d_tok;
        }
        let d_gn_sa_out = from_tokens(&d_sa_tok, hh, ww);
        let (d_x_norm, dgsa, dbsa) =
            group_norm_bwd(&tape.sa_x_in, ps.p1(p.gn_sa.g), &d_gn_sa_out, groups);
        grads.accum(p.gn_sa.g, &dgsa);
        grads.accum(p.gn_sa.b, &dbsa);
        d_x1 + &d_x_norm
    }

    fn inject_condition(
        x: &mut Array3<F>,
        cond: Option<&SpatialCondition<F>>,
        resolution: usize,
    ) {
        if let Some(c) = cond {
            if let Some(map) = c.at(resolution) {
                *x += map;
            }
        }
    }

    fn forward_inner(
        &self,
        x: &Array3<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
        mut ctrl: Hook<'_, '_, F>,
        cond: Option<&SpatialCondition<F>>,
        record: bool,
    ) -> Result<(Array3<F>, Option<UNetTape<F>>)> {
        let ps = &self.params;
        let cfg = &self.config;
        let td = cfg.time_embed_dim();
        let emb = &prompt.emb;
        if emb.dim() != (cfg.max_tokens, cfg.token_embed_dim) {
            return Err(Error::contract(format!(
                "prompt embedding has shape {:?}, expected ({}, {})",
                emb.dim(),
                cfg.max_tokens,
                cfg.token_embed_dim
            )));
        }

        // time conditioning, shared by every residual block
        let time_sin = sinusoidal_embedding::<F>(t, td).insert_axis(Axis(0));
        let time_l1_out = linear(&time_sin, ps.p2(self.time_l1.w), ps.p1(self.time_l1.b));
        let time_silu_out = silu(&time_l1_out);
        let temb_out = linear(&time_silu_out, ps.p2(self.time_l2.w), ps.p1(self.time_l2.b));
        let tv = silu(&temb_out);

        let mut h = conv2d(x, ps.p4(self.conv_in.w), ps.p1(self.conv_in.b), 1, 1);
        Self::inject_condition(&mut h, cond, cfg.resolution(0));

        let levels = cfg.levels();
        let mut enc_tapes = Vec::new();
        let mut downs_in = Vec::new();
        let mut skips: Vec<Array3<F>> = Vec::new();
        for li in 0..levels {
            let mut block_tapes = Vec::new();
            for block in &self.enc[li] {
                let (h2, rt) = self.res_forward(&block.res, &h, &tv, record);
                h = h2;
                let at = match &block.attn {
                    Some(ap) => {
                        let (h3, at) = self.attn_forward(ap, &h, emb, &mut ctrl, record)?;
                        h = h3;
                        at
                    }
                    None => None,
                };
                if record {
                    block_tapes.push(BlockTape {
                        res: rt.unwrap(),
                        attn: at,
                    });
                }
            }
            enc_tapes.push(block_tapes);
            skips.push(h.clone());
            if li < levels - 1 {
                if record {
                    downs_in.push(h.clone());
                }
                let d = &self.downs[li];
                h = conv2d(&h, ps.p4(d.w), ps.p1(d.b), d.stride, d.pad);
                Self::inject_condition(&mut h, cond, cfg.resolution(li + 1));
            }
        }

        let (h2, mid_rb1_tape) = self.res_forward(&self.mid_rb1, &h, &tv, record);
        h = h2;
        let mid_attn_tape = match &self.mid_attn {
            Some(ap) => {
                let (h3, at) = self.attn_forward(ap, &h, emb, &mut ctrl, record)?;
                h = h3;
                at
            }
            None => None,
        };
        let (h2, mid_rb2_tape) = self.res_forward(&self.mid_rb2, &h, &tv, record);
        h = h2;

        let mut dec_tapes = Vec::new();
        let mut ups_pre = Vec::new();
        let mut ups_conv_in = Vec::new();
        for (di, li) in (0..levels).rev().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            let mut block_tapes = Vec::new();
            for block in &self.dec[di] {
                let (h2, rt) = self.res_forward(&block.res, &h, &tv, record);
                h = h2;
                let at = match &block.attn {
                    Some(ap) => {
                        let (h3, at) = self.attn_forward(ap, &h, emb, &mut ctrl, record)?;
                        h = h3;
                        at
                    }
                    None => None,
                };
                if record {
                    block_tapes.push(BlockTape {
                        res: rt.unwrap(),
                        attn: at,
                    });
                }
            }
            dec_tapes.push(block_tapes);
            if li > 0 {
                if record {
                    ups_pre.push(h.clone());
                }
                let up = upsample_nearest2(&h);
                if record {
                    ups_conv_in.push(up.clone());
                }
                let u = &self.ups[di];
                h = conv2d(&up, ps.p4(u.w), ps.p1(u.b), u.stride, u.pad);
            }
        }

        let out_gn_in = h;
        let out_silu_in = group_norm(
            &out_gn_in,
            ps.p1(self.out_gn.g),
            ps.p1(self.out_gn.b),
            cfg.norm_groups(),
        );
        let out_conv_in = silu(&out_silu_in);
        let eps = conv2d(
            &out_conv_in,
            ps.p4(self.out_conv.w),
            ps.p1(self.out_conv.b),
            1,
            1,
        );

        let tape = record.then(|| UNetTape {
            time_sin,
            time_l1_out,
            time_silu_out,
            temb_out,
            tv,
            conv_in_x: x.clone(),
            enc: enc_tapes,
            downs_in,
            mid_rb1: mid_rb1_tape.unwrap(),
            mid_attn: mid_attn_tape,
            mid_rb2: mid_rb2_tape.unwrap(),
            dec: dec_tapes,
            ups_pre,
            ups_conv_in,
            out_gn_in,
            out_silu_in,
            out_conv_in,
            token_ids: prompt.tokens.clone(),
            emb: emb.clone(),
        });
        Ok((eps, tape))
    }

    /// Accumulate parameter gradients for one sample given ∂loss/∂eps.
    pub fn backward(&self, tape: &UNetTape<F>, d_eps: &Array3<F>, grads: &mut GradStore<F>) {
        let ps = &self.params;
        let cfg = &self.config;
        let groups = cfg.norm_groups();
        let tv = &tape.tv;
        let mut d_tv: Array2<F> = Array2::zeros(tv.raw_dim());
        let mut d_emb: Array2<F> = Array2::zeros(tape.emb.raw_dim());

        // output head
        let (d_out_conv_in, dw, db) =
            conv2d_bwd(&tape.out_conv_in, ps.p4(self.out_conv.w), d_eps, 1, 1);
        grads.accum(self.out_conv.w, &dw);
        grads.accum(self.out_conv.b, &db);
        let d_out_silu = silu_bwd(&tape.out_silu_in, &d_out_conv_in);
        let (mut d_h, dg, dbn) =
            group_norm_bwd(&tape.out_gn_in, ps.p1(self.out_gn.g), &d_out_silu, groups);
        grads.accum(self.out_gn.g, &dg);
        grads.accum(self.out_gn.b, &dbn);

        // decoder (reverse execution order: level 0 … deepest)
        let levels = cfg.levels();
        let mut d_skips: Vec<Option<Array3<F>>> = vec![None; levels];
        for (di, li) in (0..levels).rev().enumerate().rev() {
            if li > 0 {
                // invert: h = up_conv(upsample(h_pre))
                let u = &self.ups[di];
                let (d_up, dw, db) =
                    conv2d_bwd(&tape.ups_conv_in[di], ps.p4(u.w), &d_h, u.stride, u.pad);
                grads.accum(u.w, &dw);
                grads.accum(u.b, &db);
                d_h = upsample_nearest2_bwd(&d_up);
                let _ = &tape.ups_pre[di]; // shape reference only
            }
            for (bi, block) in self.dec[di].iter().enumerate().rev() {
                let bt = &tape.dec[di][bi];
                if let (Some(ap), Some(at)) = (&block.attn, &bt.attn) {
                    d_h = self.attn_backward(ap, at, &d_h, &tape.emb, grads, &mut d_emb);
                }
                d_h = self.res_backward(&block.res, &bt.res, &d_h, tv, grads, &mut d_tv);
            }
            // split the concatenation: carried channels, then the skip
            let skip_w = cfg.width(li);
            let carried = d_h.dim().0 - skip_w;
            let d_carried = d_h.slice(s![..carried, .., ..]).to_owned();
            let d_skip = d_h.slice(s![carried.., .., ..]).to_owned();
            d_skips[li] = Some(d_skip);
            d_h = d_carried;
        }

        // middle
        d_h = self.res_backward(&self.mid_rb2, &tape.mid_rb2, &d_h, tv, grads, &mut d_tv);
        if let (Some(ap), Some(at)) = (&self.mid_attn, &tape.mid_attn) {
            d_h = self.attn_backward(ap, at, &d_h, &tape.emb, grads, &mut d_emb);
        }
        d_h = self.res_backward(&self.mid_rb1, &tape.mid_rb1, &d_h, tv, grads, &mut d_tv);

        // encoder (reverse)
        for li in (0..levels).rev() {
            if li < levels - 1 {
                let d = &self.downs[li];
                let (d_in, dw, db) =
                    conv2d_bwd(&tape.downs_in[li], ps.p4(d.w), &d_h, d.stride, d.pad);
                grads.accum(d.w, &dw);
                grads.accum(d.b, &db);
                d_h = d_in;
            }
            if let Some(d_skip) = d_skips[li].take() {
                d_h += &d_skip;
            }
            for (bi, block) in self.enc[li].iter().enumerate().rev() {
                let bt = &tape.enc[li][bi];
                if let (Some(ap), Some(at)) = (&block.attn, &bt.attn) {
                    d_h = self.attn_backward(ap, at, &d_h, &tape.emb, grads, &mut d_emb);
                }
                d_h = self.res_backward(&block.res, &bt.res, &d_h, tv, grads, &mut d_tv);
            }
        }
        let (_, dw, db) = conv2d_bwd(&tape.conv_in_x, ps.p4(self.conv_in.w), &d_h, 1, 1);
        grads.accum(self.conv_in.w, &dw);
        grads.accum(self.conv_in.b, &db);

        // time MLP (tv = silu(l2(silu(l1(sin)))))
        let d_temb_out = silu_bwd(&tape.temb_out, &d_tv);
        let (d_time_silu, dw2, db2) =
            linear_bwd(&tape.time_silu_out, ps.p2(self.time_l2.w), &d_temb_out);
        grads.accum(self.time_l2.w, &dw2);
        grads.accum(self.time_l2.b, &db2);
        let d_l1_out = silu_bwd(&tape.time_l1_out, &d_time_silu);
        let (_, dw1, db1) = linear_bwd(&tape.time_sin, ps.p2(self.time_l1.w), &d_l1_out);
        grads.accum(self.time_l1.w, &dw1);
        grads.accum(self.time_l1.b, &db1);

        // prompt tables: scatter embedding gradient into token/pos rows
        let ted = cfg.token_embed_dim;
        let mut d_tok_table = Array2::zeros((cfg.vocab_size, ted));
        let mut d_pos_table = Array2::zeros((cfg.max_tokens, ted));
        for (i, &id) in tape.token_ids.iter().enumerate() {
            for c in 0..ted {
                d_tok_table[(id as usize, c)] += d_emb[(i, c)];
                d_pos_table[(i, c)] += d_emb[(i, c)];
            }
        }
        grads.accum(self.token_table, &d_tok_table);
        grads.accum(self.pos_table, &d_pos_table);
    }
}
