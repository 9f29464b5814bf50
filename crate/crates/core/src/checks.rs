//! Finite-difference gradient suite over every tape op, both network variants,
//! the CNN comparator and the residual losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::CnnConfig;
use crate::error::Result;
use crate::fdm::{GridSpec, NsParams};
use crate::field::Field;
use crate::lordnet::{Bound, NetworkConfig};
use crate::msr::{self, ResidualKind, ResidualSpec};
use crate::tensor::{gradcheck, ConvBoundary, StencilBoundary, StencilKernel, Tape, Var, GRADCHECK_STEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub name: String,
    pub seed: u64,
    pub deviation: f64,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn network_case(name: &'static str, cfg: NetworkConfig) -> Case {
    let layout = cfg.layout();
    let names: Vec<String> = layout.iter().map(|(k, _)| k.clone()).collect();
    let mut shapes = vec![vec![1, cfg.side, cfg.side]];
    shapes.extend(layout.into_iter().map(|(_, s)| s));
    Case {
        name,
        shapes,
        build: Box::new(move |t, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = cfg.forward(t, &bound, v[0])?;
            let y = t.gelu(y);
            t.mean_square(y)
        }),
    }
}

fn cnn_case(cfg: CnnConfig) -> Case {
    let layout = cfg.layout();
    let names: Vec<String> = layout.iter().map(|(k, _)| k.clone()).collect();
    let mut shapes = vec![vec![1, cfg.side, cfg.side]];
    shapes.extend(layout.into_iter().map(|(_, s)| s));
    Case {
        name: "cnn",
        shapes,
        build: Box::new(move |t, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = cfg.forward(t, &bound, v[0])?;
            t.mean_square(y)
        }),
    }
}

fn cases() -> Result<Vec<Case>> {
    let periodic = StencilKernel::laplacian_5pt(StencilBoundary::PeriodicWrap);
    let interior = StencilKernel::laplacian_5pt(StencilBoundary::DirichletInteriorOnly);
    let poisson = ResidualSpec::new(ResidualKind::PoissonDirichlet, GridSpec::dirichlet(6)?, None)?;
    let ns_params = NsParams::new(100.0, 0.01, 1)?;
    let lid = ResidualSpec::new(ResidualKind::NsLiddriven, GridSpec::lid_driven(6, 1.0)?, Some(ns_params))?;
    let ns_periodic = ResidualSpec::new(ResidualKind::NsPeriodic, GridSpec::periodic(5)?, Some(ns_params))?;
    let forcing = Field::from_fn(&[6, 6], |ix| ((ix[0] * 3 + ix[1]) % 4) as f64 - 1.5);
    let psi_lid = Field::from_fn(&[6, 6], |ix| {
        if ix[0] == 0 || ix[1] == 0 || ix[0] == 5 || ix[1] == 5 {
            0.0
        } else {
            ((ix[0] * 7 + ix[1] * 5) % 6) as f64 * 0.01
        }
    });
    let psi_per = Field::from_fn(&[5, 5], |ix| ((ix[0] * 2 + ix[1] * 3) % 5) as f64 * 0.02);

    let mut ns = NetworkConfig::ns_lord(4);
    ns.channels = 3;
    ns.embed_hidden = [4, 3];
    let mut ns_embed = ns.clone();
    ns_embed.factor_placement = crate::lordnet::FactorPlacement::AfterEmbed;
    let mut linear = NetworkConfig::poisson_linear(4, 2, 2);
    linear.mixers = true;
    linear.rank = 2;

    Ok(vec![
        case("add", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            t.mean_square(y)
        }),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            t.mean_square(y)
        }),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.mean_square(y)
        }),
        case("scale", &[&[4]], |t, v| {
            let y = t.scale(v[0], -1.7);
            t.mean_square(y)
        }),
        case("gelu", &[&[3, 3]], |t, v| {
            let y = t.gelu(v[0]);
            t.mean_square(y)
        }),
        case("conv1x1", &[&[3, 4, 4], &[2, 3], &[2]], |t, v| {
            let y = t.conv1x1(v[0], v[1], Some(v[2]))?;
            t.mean_square(y)
        }),
        case("axis_matmul_0", &[&[2, 4, 3], &[2, 4, 5]], |t, v| {
            let y = t.axis_matmul(v[0], v[1], 0)?;
            t.mean_square(y)
        }),
        case("axis_matmul_1", &[&[2, 4, 3], &[2, 3, 2]], |t, v| {
            let y = t.axis_matmul(v[0], v[1], 1)?;
            t.mean_square(y)
        }),
        case("axis_matmul_3d", &[&[2, 3, 2, 3], &[2, 2, 4]], |t, v| {
            let y = t.axis_matmul(v[0], v[1], 1)?;
            t.mean_square(y)
        }),
        case("channel_dense", &[&[2, 3, 3], &[2, 4, 9]], |t, v| {
            let y = t.channel_dense(v[0], v[1])?;
            t.mean_square(y)
        }),
        case("stencil_periodic", &[&[2, 5, 4]], move |t, v| {
            let y = t.stencil(v[0], &periodic, 0.25)?;
            t.mean_square(y)
        }),
        case("stencil_interior", &[&[1, 5, 6]], move |t, v| {
            let y = t.stencil(v[0], &interior, 0.2)?;
            t.mean_square(y)
        }),
        case("conv2d_zero_pad", &[&[2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d_dilated(v[0], v[1], 2, ConvBoundary::ZeroPad)?;
            t.mean_square(y)
        }),
        case("conv2d_periodic", &[&[2, 5, 4], &[1, 2, 3, 3]], |t, v| {
            let y = t.conv2d_dilated(v[0], v[1], 3, ConvBoundary::PeriodicWrap)?;
            t.mean_square(y)
        }),
        case("mean_square", &[&[7]], |t, v| t.mean_square(v[0])),
        case("select_rank", &[&[2, 3, 4]], |t, v| {
            let y = t.select_rank(v[0], 2)?;
            t.mean_square(y)
        }),
        case("channel_scale", &[&[2, 3, 3], &[2, 2]], |t, v| {
            let y = t.channel_scale(v[0], v[1], 1)?;
            t.mean_square(y)
        }),
        case("pad_zero", &[&[1, 3, 2]], |t, v| {
            let y = t.pad_zero(v[0], 1)?;
            let y = t.gelu(y);
            t.mean_square(y)
        }),
        case("reshape", &[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.select_rank(y, 1)?;
            t.mean_square(y)
        }),
        network_case("poisson_linear_network", linear),
        network_case("ns_lord_network", ns),
        network_case("ns_lord_network_after_embed", ns_embed),
        cnn_case(CnnConfig::new(5, 2, ConvBoundary::ZeroPad)),
        case("poisson_residual", &[&[1, 4, 4]], move |t, v| {
            let r = msr::poisson_residual(t, v[0], &forcing, &poisson)?;
            msr::msr_loss(t, r)
        }),
        case("ns_residual_liddriven", &[&[1, 4, 4]], move |t, v| {
            let r = msr::ns_residual(t, &psi_lid, v[0], &lid)?;
            msr::msr_loss(t, r)
        }),
        case("ns_residual_periodic", &[&[1, 5, 5]], move |t, v| {
            let r = msr::ns_residual(t, &psi_per, v[0], &ns_periodic)?;
            msr::msr_loss(t, r)
        }),
    ])
}

/// Worst relative deviation of every case for seeds `0..seeds`.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for c in cases()? {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Field> = c
                .shapes
                .iter()
                .map(|s| Field::from_fn(s, |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let deviation = gradcheck(&inputs, &c.build, GRADCHECK_STEP)?;
            out.push(GradcheckResult {
                name: c.name.to_string(),
                seed,
                deviation,
            });
        }
    }
    Ok(out)
}
