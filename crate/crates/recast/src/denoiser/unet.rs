//! Image denoiser: a small encoder-decoder with residual blocks. Each block
//! is two group-norm/swish/conv stages with the time embedding projected and
//! added per channel between them, and a residual connection (1x1 conv when
//! the channel count changes). Downsampling is 2x2 average pooling, and the
//! decoder upsamples and concatenates the matching encoder feature.

use crate::autodiff::{group_norm, Tensor};
use crate::denoiser::{time_embedding, DenoiserConfig, Init, ModelView};
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

struct BlockDims {
    name: String,
    cin: usize,
    cout: usize,
}

fn blocks(cfg: &DenoiserConfig) -> Vec<BlockDims> {
    let ch = &cfg.hidden;
    let levels = ch.len();
    let mut out = Vec::new();
    out.push(BlockDims {
        name: "enc0".into(),
        cin: ch[0],
        cout: ch[0],
    });
    for i in 1..levels {
        out.push(BlockDims {
            name: format!("enc{}", i),
            cin: ch[i - 1],
            cout: ch[i],
        });
    }
    out.push(BlockDims {
        name: "mid".into(),
        cin: ch[levels - 1],
        cout: ch[levels - 1],
    });
    for i in (1..levels).rev() {
        out.push(BlockDims {
            name: format!("dec{}", i),
            cin: ch[i] + ch[i - 1],
            cout: ch[i - 1],
        });
    }
    out
}

pub(crate) fn validate_extra(cfg: &DenoiserConfig) -> Result<()> {
    for b in blocks(cfg) {
        if b.cin % cfg.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "block {} input channels {} not divisible by {} norm groups",
                b.name, b.cin, cfg.groups
            )));
        }
    }
    Ok(())
}

pub(crate) fn param_spec(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.data_shape[0];
    let e = cfg.time_embed_dim;
    let c0 = cfg.hidden[0];
    let mut spec = Vec::new();
    spec.push(("conv_in.weight".into(), vec![c0, c, 3, 3], Init::FanIn(c * 9)));
    spec.push(("conv_in.bias".into(), vec![c0], Init::Zero));
    for b in blocks(cfg) {
        let p = |suffix: &str| format!("{}.{}", b.name, suffix);
        spec.push((p("gn1.gamma"), vec![b.cin], Init::One));
        spec.push((p("gn1.beta"), vec![b.cin], Init::Zero));
        spec.push((p("conv1.weight"), vec![b.cout, b.cin, 3, 3], Init::FanIn(b.cin * 9)));
        spec.push((p("conv1.bias"), vec![b.cout], Init::Zero));
        spec.push((p("temb.weight"), vec![e, b.cout], Init::FanIn(e)));
        spec.push((p("temb.bias"), vec![b.cout], Init::Zero));
        spec.push((p("gn2.gamma"), vec![b.cout], Init::One));
        spec.push((p("gn2.beta"), vec![b.cout], Init::Zero));
        spec.push((p("conv2.weight"), vec![b.cout, b.cout, 3, 3], Init::FanIn(b.cout * 9)));
        spec.push((p("conv2.bias"), vec![b.cout], Init::Zero));
        if b.cin != b.cout {
            spec.push((p("skip.weight"), vec![b.cout, b.cin, 1, 1], Init::FanIn(b.cin)));
            spec.push((p("skip.bias"), vec![b.cout], Init::Zero));
        }
    }
    spec.push(("conv_out.weight".into(), vec![c, c0, 3, 3], Init::FanIn(c0 * 9)));
    spec.push(("conv_out.bias".into(), vec![c], Init::Zero));
    spec
}

fn res_block(
    view: &ModelView,
    name: &str,
    x: &Tensor,
    emb: &Tensor,
    cin: usize,
    cout: usize,
    groups: usize,
) -> Result<Tensor> {
    let p = |suffix: &str| format!("{}.{}", name, suffix);
    let h = group_norm(
        x,
        view.p(&p("gn1.gamma"))?,
        view.p(&p("gn1.beta"))?,
        groups,
        GN_EPS,
    )?
    .swish()?
    .conv2d(view.p(&p("conv1.weight"))?, view.p(&p("conv1.bias"))?)?;

    let cond = emb
        .matmul(view.p(&p("temb.weight"))?)?
        .add(&view.p(&p("temb.bias"))?.reshape(&[1, cout])?)?
        .reshape(&[cout, 1, 1])?;
    let h = h.add(&cond)?;

    let h = group_norm(
        &h,
        view.p(&p("gn2.gamma"))?,
        view.p(&p("gn2.beta"))?,
        groups,
        GN_EPS,
    )?
    .swish()?
    .conv2d(view.p(&p("conv2.weight"))?, view.p(&p("conv2.bias"))?)?;

    let skip = if cin != cout {
        x.conv2d(view.p(&p("skip.weight"))?, view.p(&p("skip.bias"))?)?
    } else {
        x.clone()
    };
    h.add(&skip)
}

pub(crate) fn forward(view: &ModelView, x: &Tensor, t: usize) -> Result<Tensor> {
    let cfg = view.config();
    let ch = &cfg.hidden;
    let levels = ch.len();
    let groups = cfg.groups;
    let emb = time_embedding(t, cfg.time_embed_dim)?.reshape(&[1, cfg.time_embed_dim])?;

    let mut h = x.conv2d(view.p("conv_in.weight")?, view.p("conv_in.bias")?)?;
    h = res_block(view, "enc0", &h, &emb, ch[0], ch[0], groups)?;

    let mut skips = vec![h.clone()];
    for i in 1..levels {
        h = h.avg_pool2()?;
        h = res_block(view, &format!("enc{}", i), &h, &emb, ch[i - 1], ch[i], groups)?;
        if i + 1 < levels {
            skips.push(h.clone());
        }
    }

    h = res_block(view, "mid", &h, &emb, ch[levels - 1], ch[levels - 1], groups)?;

    for i in (1..levels).rev() {
        let up = h.upsample2()?;
        let skip = skips.pop().expect("one skip per decoder block");
        let cat = Tensor::concat(0, &[&up, &skip])?;
        h = res_block(
            view,
            &format!("dec{}", i),
            &cat,
            &emb,
            ch[i] + ch[i - 1],
            ch[i - 1],
            groups,
        )?;
    }

    h.conv2d(view.p("conv_out.weight")?, view.p("conv_out.bias")?)
}
