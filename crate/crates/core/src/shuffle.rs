//! Local and global patch shuffling used to build primal/shuffled pairs.
//!
//! The local variant groups the patch grid into 2x2 quadrille blocks and,
//! per block with probability `eta`, replaces the four patches with a
//! uniformly random permutation of themselves (which may be the identity).
//! Block positions never move.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::vit::{patchify, unpatchify};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShuffleConfig {
    pub patch_size: usize,
    pub eta: f64,
    pub seed: u64,
}

impl ShuffleConfig {
    pub fn new(patch_size: usize, eta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!(
                "shuffle probability {eta} is outside [0, 1]"
            )));
        }
        if patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(ShuffleConfig {
            patch_size,
            eta,
            seed,
        })
    }
}

/// How patches are grouped into blocks of four.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockGrouping {
    /// 2x2 neighbourhoods on the patch grid (each block is `2P x 2P` pixels).
    #[default]
    Spatial,
    /// Four consecutive row-major patch indices, `4i..4i+3`.
    Flattened,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleRecord {
    /// `permutation[dest] = source` over patch indices.
    pub permutation: Vec<usize>,
    /// Blocks whose shuffle fired, in increasing order. Empty for the
    /// global shuffle.
    pub shuffled_blocks: Vec<usize>,
}

impl ShuffleRecord {
    pub fn identity(n: usize) -> Self {
        ShuffleRecord {
            permutation: (0..n).collect(),
            shuffled_blocks: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// True when every cycle of the permutation stays inside one block.
    pub fn cycles_within(&self, blocks: &[[usize; 4]]) -> bool {
        let mut block_of = vec![usize::MAX; self.permutation.len()];
        for (b, members) in blocks.iter().enumerate() {
            for &m in members {
                block_of[m] = b;
            }
        }
        self.permutation
            .iter()
            .enumerate()
            .all(|(dest, &src)| block_of[dest] == block_of[src])
    }
}

fn grid_of(image: &Tensor, patch: usize) -> Result<(usize, usize)> {
    let [_, h, w] = image.dims() else {
        return Err(Error::Invalid(format!(
            "image must be C x H x W, got {:?}",
            image.dims()
        )));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((h / patch, w / patch))
}

/// Patch indices of every block, block index in row-major block order.
pub fn block_members(
    grid_h: usize,
    grid_w: usize,
    grouping: BlockGrouping,
) -> Result<Vec<[usize; 4]>> {
    match grouping {
        BlockGrouping::Spatial => {
            if grid_h % 2 != 0 || grid_w % 2 != 0 {
                return Err(Error::Invalid(format!(
                    "local shuffle needs an even patch grid, got {grid_h}x{grid_w}"
                )));
            }
            let mut out = Vec::with_capacity(grid_h * grid_w / 4);
            for by in 0..grid_h / 2 {
                for bx in 0..grid_w / 2 {
                    let tl = 2 * by * grid_w + 2 * bx;
                    out.push([tl, tl + 1, tl + grid_w, tl + grid_w + 1]);
                }
            }
            Ok(out)
        }
        BlockGrouping::Flattened => {
            let n = grid_h * grid_w;
            if n % 4 != 0 {
                return Err(Error::Invalid(format!(
                    "flattened grouping needs a multiple of 4 patches, got {n}"
                )));
            }
            Ok((0..n / 4)
                .map(|i| [4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3])
                .collect())
        }
    }
}

/// Moves patch `permutation[d]` of `image` to position `d`.
pub fn apply_permutation(image: &Tensor, patch: usize, permutation: &[usize]) -> Result<Tensor> {
    let (gh, gw) = grid_of(image, patch)?;
    let n = gh * gw;
    let mut seen = vec![false; n];
    if permutation.len() != n
        || permutation
            .iter()
            .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::Invalid(format!("not a permutation of {n} patches")));
    }
    let patches = patchify(image, patch)?;
    let row = patches.dims()[1];
    let src = patches.data();
    let mut out = Vec::with_capacity(src.len());
    for &p in permutation {
        out.extend_from_slice(&src[p * row..(p + 1) * row]);
    }
    let dims = image.dims();
    unpatchify(
        &Tensor::new(patches.dims(), out)?,
        dims[0],
        dims[1],
        dims[2],
        patch,
    )
}

/// Block shuffle driven by `pick`, which returns a local permutation
/// (`local[dest] = source` within the block's four members) for blocks that
/// should be shuffled.
pub fn local_patch_shuffle_with<F>(
    image: &Tensor,
    patch: usize,
    grouping: BlockGrouping,
    mut pick: F,
) -> Result<(Tensor, ShuffleRecord)>
where
    F: FnMut(usize) -> Option<[usize; 4]>,
{
    let (gh, gw) = grid_of(image, patch)?;
    let blocks = block_members(gh, gw, grouping)?;
    let mut record = ShuffleRecord::identity(gh * gw);
    for (b, members) in blocks.iter().enumerate() {
        if let Some(local) = pick(b) {
            for (j, &dest) in members.iter().enumerate() {
                record.permutation[dest] = members[local[j]];
            }
            record.shuffled_blocks.push(b);
        }
    }
    let out = if record.is_identity() {
        image.clone()
    } else {
        apply_permutation(image, patch, &record.permutation)?
    };
    Ok((out, record))
}

pub fn local_patch_shuffle(image: &Tensor, cfg: &ShuffleConfig) -> Result<(Tensor, ShuffleRecord)> {
    local_patch_shuffle_grouped(image, cfg, BlockGrouping::Spatial)
}

pub fn local_patch_shuffle_grouped(
    image: &Tensor,
    cfg: &ShuffleConfig,
    grouping: BlockGrouping,
) -> Result<(Tensor, ShuffleRecord)> {
    let mut rng = seeded(cfg.seed);
    local_patch_shuffle_with(image, cfg.patch_size, grouping, |_| {
        let draw: f64 = rng.gen();
        if draw < cfg.eta {
            let mut local = [0, 1, 2, 3];
            local.shuffle(&mut rng);
            Some(local)
        } else {
            None
        }
    })
}

/// One uniformly random permutation over all patches.
pub fn global_patch_shuffle(
    image: &Tensor,
    cfg: &ShuffleConfig,
) -> Result<(Tensor, ShuffleRecord)> {
    let (gh, gw) = grid_of(image, cfg.patch_size)?;
    let mut rng = seeded(cfg.seed);
    let mut permutation: Vec<usize> = (0..gh * gw).collect();
    permutation.shuffle(&mut rng);
    let out = apply_permutation(image, cfg.patch_size, &permutation)?;
    Ok((
        out,
        ShuffleRecord {
            permutation,
            shuffled_blocks: Vec::new(),
        },
    ))
}
