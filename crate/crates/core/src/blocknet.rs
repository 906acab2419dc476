//! The block-structured classifier `fc ∘ block_n ∘ … ∘ block_1 ∘ stem`, with
//! a backward pass that only reaches as far as the front-most trainable
//! block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    linear_forward, linear_input_grad, linear_param_grads, relu_backward, relu_in_place,
    softmax_xent, Tensor2,
};

/// Identifies one parameter group θ_i. Ordered front (input) to back (logits).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Stem,
    /// Residual block, zero-based (`Res(0)` is "block1").
    Res(usize),
    Fc,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Stem => f.write_str("stem"),
            BlockId::Res(i) => write!(f, "block{}", i + 1),
            BlockId::Fc => f.write_str("fc"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stem" => Ok(BlockId::Stem),
            "fc" => Ok(BlockId::Fc),
            _ => s
                .strip_prefix("block")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| BlockId::Res(n - 1))
                .ok_or_else(|| Error::Input(format!("unknown block id {s:?}"))),
        }
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_res_blocks: usize,
    pub n_classes: usize,
    pub layers_per_block: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 16,
            n_res_blocks: 3,
            n_classes: 10,
            layers_per_block: 2,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_res_blocks", self.n_res_blocks),
            ("layers_per_block", self.layers_per_block),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("{name} must be at least 1")));
        }
        if self.n_classes < 2 {
            return Err(Error::Input(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Every block id, front to back.
    pub fn block_ids(&self) -> Vec<BlockId> {
        std::iter::once(BlockId::Stem)
            .chain((0..self.n_res_blocks).map(BlockId::Res))
            .chain(std::iter::once(BlockId::Fc))
            .collect()
    }

    pub fn contains(&self, id: BlockId) -> bool {
        match id {
            BlockId::Res(i) => i < self.n_res_blocks,
            _ => true,
        }
    }
}

/// One affine layer `y = x·W + b`; `W` is `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl Affine {
    fn he_normal(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            w: Tensor2::from_vec(fan_in, fan_out, data).expect("sized buffer"),
            b: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        linear_forward(x, &self.w, &self.b)
    }
}

/// The set S of blocks whose parameters are trained; everything else is
/// frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSelection {
    pub name: String,
    pub ids: BTreeSet<BlockId>,
}

impl BlockSelection {
    pub fn new(name: impl Into<String>, ids: impl IntoIterator<Item = BlockId>) -> Self {
        Self {
            name: name.into(),
            ids: ids.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self::new("none", [])
    }

    pub fn full(arch: &ArchSpec) -> Self {
        Self::new("full", arch.block_ids())
    }

    /// Resolves a selection name against an architecture.
    ///
    /// Accepts `full`, any single block id, or several joined by `+`
    /// (`block2+fc`). With `stem_with_block1`, naming `block1` also selects
    /// the stem.
    pub fn parse(name: &str, arch: &ArchSpec, stem_with_block1: bool) -> Result<Self> {
        if name == "full" {
            return Ok(Self::full(arch));
        }
        let mut ids = BTreeSet::new();
        for part in name.split('+') {
            let id: BlockId = part.trim().parse()?;
            if !arch.contains(id) {
                return Err(Error::Input(format!(
                    "block {id} not in a {}-block net",
                    arch.n_res_blocks
                )));
            }
            if stem_with_block1 && id == BlockId::Res(0) {
                ids.insert(BlockId::Stem);
            }
            ids.insert(id);
        }
        Ok(Self {
            name: name.to_string(),
            ids,
        })
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.ids.contains(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Front-most selected block, i.e. where backpropagation may stop.
    pub fn front(&self) -> Option<BlockId> {
        self.ids.iter().next().copied()
    }

    fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Usage("block selection is empty".into()));
        }
        if let Some(bad) = self.ids.iter().find(|id| !arch.contains(**id)) {
            return Err(Error::Input(format!("selection names unknown block {bad}")));
        }
        Ok(())
    }
}

/// Gradient of one affine layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub dw: Tensor2,
    pub db: Vec<f64>,
}

pub type BlockGrads = BTreeMap<BlockId, Vec<ParamGrad>>;

/// Result of [`BlockNet::backward_selected`].
#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    pub logits: Tensor2,
    pub grads: BlockGrads,
    /// Front-most block whose output received a cotangent.
    pub reached: BlockId,
}

#[derive(Debug)]
struct LayerCache {
    input: Tensor2,
    pre_act: Tensor2,
}

#[derive(Debug)]
struct ForwardCache {
    stem: LayerCache,
    blocks: Vec<Vec<LayerCache>>,
    fc_input: Tensor2,
    logits: Tensor2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNet {
    arch: ArchSpec,
    seed: u64,
    stem: Affine,
    blocks: Vec<Vec<Affine>>,
    fc: Affine,
}

impl BlockNet {
    /// He-normal weights and zero biases, deterministic in `(arch, seed)`.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.hidden_dim;
        let stem = Affine::he_normal(arch.input_dim, h, &mut rng);
        let blocks = (0..arch.n_res_blocks)
            .map(|_| {
                (0..arch.layers_per_block)
                    .map(|_| Affine::he_normal(h, h, &mut rng))
                    .collect()
            })
            .collect();
        let fc = Affine::he_normal(h, arch.n_classes, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            seed,
            stem,
            blocks,
            fc,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.arch.block_ids()
    }

    pub fn layers(&self, id: BlockId) -> &[Affine] {
        match id {
            BlockId::Stem => std::slice::from_ref(&self.stem),
            BlockId::Res(i) => &self.blocks[i],
            BlockId::Fc => std::slice::from_ref(&self.fc),
        }
    }

    pub fn layers_mut(&mut self, id: BlockId) -> &mut [Affine] {
        match id {
            BlockId::Stem => std::slice::from_mut(&mut self.stem),
            BlockId::Res(i) => &mut self.blocks[i],
            BlockId::Fc => std::slice::from_mut(&mut self.fc),
        }
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "net expects {} input columns, got a {}x{} batch",
                self.arch.input_dim,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Applies a single block to its input: `relu(affine)` for the stem,
    /// `h + g(h)` for residual blocks, plain affine for the classifier.
    pub fn apply_block(&self, id: BlockId, h: &Tensor2) -> Result<Tensor2> {
        match id {
            BlockId::Stem => {
                let mut z = self.stem.forward(h)?;
                relu_in_place(&mut z);
                Ok(z)
            }
            BlockId::Res(i) => {
                let mut a = h.clone();
                for layer in &self.blocks[i] {
                    a = layer.forward(&a)?;
                    relu_in_place(&mut a);
                }
                a.add_assign(h)?;
                Ok(a)
            }
            BlockId::Fc => self.fc.forward(h),
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for id in self.block_ids() {
            h = self.apply_block(id, &h)?;
        }
        Ok(h)
    }

    fn forward_cached(&self, x: &Tensor2) -> Result<ForwardCache> {
        self.check_input(x)?;
        let pre = self.stem.forward(x)?;
        let mut h = pre.clone();
        relu_in_place(&mut h);
        let stem = LayerCache {
            input: x.clone(),
            pre_act: pre,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut caches = Vec::with_capacity(block.len());
            let mut a = h.clone();
            for layer in block {
                let z = layer.forward(&a)?;
                let input = std::mem::replace(&mut a, z.clone());
                relu_in_place(&mut a);
                caches.push(LayerCache { input, pre_act: z });
            }
            a.add_assign(&h)?;
            h = a;
            blocks.push(caches);
        }
        let logits = self.fc.forward(&h)?;
        Ok(ForwardCache {
            stem,
            blocks,
            fc_input: h,
            logits,
        })
    }

    /// Which pre-activations are strictly positive, for every ReLU in the net.
    pub(crate) fn relu_pattern(&self, x: &Tensor2) -> Result<Vec<bool>> {
        let cache = self.forward_cached(x)?;
        let mut out: Vec<bool> = cache.stem.pre_act.data().iter().map(|&z| z > 0.0).collect();
        for lc in cache.blocks.iter().flatten() {
            out.extend(lc.pre_act.data().iter().map(|&z| z > 0.0));
        }
        Ok(out)
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, x: &Tensor2, y: &[usize]) -> Result<f64> {
        Ok(softmax_xent(&self.forward(x)?, y)?.0)
    }

    /// Loss and parameter gradients for the blocks in `selection` only.
    /// Cotangents are propagated from the logits down to the front-most
    /// selected block and no further.
    pub fn backward_selected(
        &self,
        selection: &BlockSelection,
        x: &Tensor2,
        y: &[usize],
    ) -> Result<Backward> {
        selection.validate(&self.arch)?;
        let front = selection.front().expect("validated nonempty");
        let cache = self.forward_cached(x)?;
        let (loss, dlogits) = softmax_xent(&cache.logits, y)?;
        let mut grads = BlockGrads::new();
        let mut reached = BlockId::Fc;

        if selection.contains(BlockId::Fc) {
            let (dw, db) = linear_param_grads(&cache.fc_input, &dlogits);
            grads.insert(BlockId::Fc, vec![ParamGrad { dw, db }]);
        }
        if front == BlockId::Fc {
            return Ok(Backward {
                loss,
                logits: cache.logits,
                grads,
                reached,
            });
        }

        let mut dh = linear_input_grad(&self.fc.w, &dlogits);
        for (i, (block, caches)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let id = BlockId::Res(i);
            if front > id {
                break;
            }
            reached = id;
            let trainable = selection.contains(id);
            let need_input_grad = front < id;
            let mut layer_grads = Vec::new();
            let mut da = dh.clone();
            for (l, (layer, lc)) in block.iter().zip(caches).enumerate().rev() {
                let dz = relu_backward(&lc.pre_act, &da)?;
                if trainable {
                    let (dw, db) = linear_param_grads(&lc.input, &dz);
                    layer_grads.push(ParamGrad { dw, db });
                }
                if l > 0 || need_input_grad {
                    da = linear_input_grad(&layer.w, &dz);
                }
            }
            if trainable {
                layer_grads.reverse();
                grads.insert(id, layer_grads);
            }
            if need_input_grad {
                dh.add_assign(&da)?;
            }
        }

        if front == BlockId::Stem {
            reached = BlockId::Stem;
            let dz = relu_backward(&cache.stem.pre_act, &dh)?;
            let (dw, db) = linear_param_grads(&cache.stem.input, &dz);
            grads.insert(BlockId::Stem, vec![ParamGrad { dw, db }]);
        }

        Ok(Backward {
            loss,
            logits: cache.logits,
            grads,
            reached,
        })
    }

    /// Copy of the net with i.i.d. `N(0, sigma²)` added to every weight and
    /// bias of one block.
    pub fn inject_noise(&self, id: BlockId, sigma: f64, seed: u64) -> Result<BlockNet> {
        if !self.arch.contains(id) {
            return Err(Error::Input(format!("unknown block id {id}")));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Input(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        let mut out = self.clone();
        if sigma == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        for layer in out.layers_mut(id) {
            for v in layer.w.data_mut().iter_mut().chain(layer.b.iter_mut()) {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(out)
    }

    /// Number of scalars in the selected blocks. An empty selection counts 0.
    pub fn trainable_param_count(&self, selection: &BlockSelection) -> usize {
        selection
            .ids
            .iter()
            .filter(|id| self.arch.contains(**id))
            .flat_map(|&id| self.layers(id))
            .map(Affine::param_count)
            .sum()
    }

    /// SHA-256 over the bit patterns of every parameter, front to back.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for id in self.block_ids() {
            self.hash_block_into(id, &mut hasher);
        }
        hex::encode(hasher.finalize())
    }

    /// SHA-256 of one block's parameters.
    pub fn block_digest(&self, id: BlockId) -> String {
        let mut hasher = Sha256::new();
        self.hash_block_into(id, &mut hasher);
        hex::encode(hasher.finalize())
    }

    fn hash_block_into(&self, id: BlockId, hasher: &mut Sha256) {
        for layer in self.layers(id) {
            for v in layer.w.data().iter().chain(&layer.b) {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            digest: self.digest(),
            net: self.clone(),
        };
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                doc.format,
                doc.version
            )));
        }
        doc.net.validate_shapes()?;
        if doc.net.digest() != doc.digest {
            return Err(Error::Input(format!(
                "{}: parameter digest mismatch",
                path.display()
            )));
        }
        Ok(doc.net)
    }

    fn validate_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let h = self.arch.hidden_dim;
        if self.blocks.len() != self.arch.n_res_blocks {
            return Err(Error::Input(
                "residual block count does not match arch".into(),
            ));
        }
        let mut expected = vec![(BlockId::Stem, vec![(self.arch.input_dim, h)])];
        let branch = vec![(h, h); self.arch.layers_per_block];
        for i in 0..self.arch.n_res_blocks {
            if self.blocks[i].len() != self.arch.layers_per_block {
                return Err(Error::Input(format!(
                    "block{} has the wrong layer count",
                    i + 1
                )));
            }
            expected.push((BlockId::Res(i), branch.clone()));
        }
        expected.push((BlockId::Fc, vec![(h, self.arch.n_classes)]));
        for (id, shapes) in expected {
            for (layer, (fan_in, fan_out)) in self.layers(id).iter().zip(shapes) {
                if layer.w.shape() != (fan_in, fan_out)
                    || layer.b.len() != fan_out
                    || layer.w.len() != fan_in * fan_out
                {
                    return Err(Error::Input(format!(
                        "{id} layer has shape inconsistent with arch"
                    )));
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "tbft-blocknet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    digest: String,
    net: BlockNet,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 5,
            hidden_dim: 6,
            n_res_blocks: 3,
            n_classes: 4,
            layers_per_block: 2,
        }
    }

    fn random_batch(rows: usize, cols: usize, classes: usize, seed: u64) -> (Tensor2, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        (Tensor2::from_vec(rows, cols, data).unwrap(), y)
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = BlockNet::build(&small_arch(), 1).unwrap();
        let b = BlockNet::build(&small_arch(), 1).unwrap();
        let c = BlockNet::build(&small_arch(), 2).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
        assert_ne!(a.digest(), c.digest());
        assert!(a.layers(BlockId::Fc)[0].b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_id_naming() {
        let ids: Vec<String> = ArchSpec::default()
            .block_ids()
            .iter()
            .map(|b| b.to_string())
            .collect();
        assert_eq!(ids, ["stem", "block1", "block2", "block3", "fc"]);
        assert_eq!("block3".parse::<BlockId>().unwrap(), BlockId::Res(2));
        assert!("block0".parse::<BlockId>().is_err());
        assert!("conv".parse::<BlockId>().is_err());
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = small_arch();
        a.n_classes = 1;
        assert!(BlockNet::build(&a, 0).is_err());
        let mut b = small_arch();
        b.hidden_dim = 0;
        assert!(BlockNet::build(&b, 0).is_err());
    }

    #[test]
    fn forward_is_block_composition() {
        let net = BlockNet::build(&small_arch(), 3).unwrap();
        let (x, _) = random_batch(7, 5, 4, 9);
        let mut h = net.apply_block(BlockId::Stem, &x).unwrap();
        for i in 0..3 {
            h = net.apply_block(BlockId::Res(i), &h).unwrap();
        }
        let manual = net.apply_block(BlockId::Fc, &h).unwrap();
        let logits = net.forward(&x).unwrap();
        for (a, b) in manual.data().iter().zip(logits.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_batch_forward() {
        let net = BlockNet::build(&small_arch(), 3).unwrap();
        let logits = net.forward(&Tensor2::zeros(0, 5)).unwrap();
        assert_eq!(logits.shape(), (0, 4));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = BlockNet::build(&small_arch(), 3).unwrap();
        assert!(matches!(
            net.forward(&Tensor2::zeros(2, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_block_weights_pass_through() {
        // With all residual parameters zero each block is the identity, so the
        // logits must equal fc(stem(x)) computed by hand.
        let arch = ArchSpec {
            input_dim: 2,
            hidden_dim: 2,
            n_res_blocks: 2,
            n_classes: 2,
            layers_per_block: 2,
        };
        let mut net = BlockNet::build(&arch, 0).unwrap();
        for i in 0..2 {
            for layer in net.layers_mut(BlockId::Res(i)) {
                layer.w.data_mut().fill(0.0);
                layer.b.fill(0.0);
            }
        }
        net.layers_mut(BlockId::Stem)[0] = Affine {
            w: Tensor2::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap(),
            b: vec![0.0, 1.0],
        };
        net.layers_mut(BlockId::Fc)[0] = Affine {
            w: Tensor2::from_rows(&[vec![1.0, 0.0], vec![3.0, -2.0]]).unwrap(),
            b: vec![0.5, 0.0],
        };
        let x = Tensor2::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        // stem: [1,1] -> relu([3, 0.5]) = [3, 0.5]; [-1,0] -> relu([-1, 2]) = [0, 2]
        // fc:   [3,0.5] -> [3+1.5+0.5, -1] = [5, -1]; [0,2] -> [6+0.5, -4] = [6.5, -4]
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.data(), &[5.0, -1.0, 6.5, -4.0]);
    }

    #[test]
    fn backward_scope_fc_only() {
        let net = BlockNet::build(&small_arch(), 4).unwrap();
        let (x, y) = random_batch(3, 5, 4, 1);
        let sel = BlockSelection::parse("fc", net.arch(), true).unwrap();
        let bw = net.backward_selected(&sel, &x, &y).unwrap();
        assert_eq!(
            bw.grads.keys().copied().collect::<Vec<_>>(),
            vec![BlockId::Fc]
        );
        assert_eq!(bw.reached, BlockId::Fc);
    }

    #[test]
    fn backward_scope_block1_traverses_everything_after() {
        let net = BlockNet::build(&small_arch(), 4).unwrap();
        let (x, y) = random_batch(3, 5, 4, 1);
        let sel = BlockSelection::parse("block1", net.arch(), false).unwrap();
        let bw = net.backward_selected(&sel, &x, &y).unwrap();
        assert_eq!(
            bw.grads.keys().copied().collect::<Vec<_>>(),
            vec![BlockId::Res(0)]
        );
        assert_eq!(bw.reached, BlockId::Res(0));
        let grouped = BlockSelection::parse("block1", net.arch(), true).unwrap();
        let bw = net.backward_selected(&grouped, &x, &y).unwrap();
        assert_eq!(
            bw.grads.keys().copied().collect::<Vec<_>>(),
            vec![BlockId::Stem, BlockId::Res(0)]
        );
        assert_eq!(bw.reached, BlockId::Stem);
    }

    #[test]
    fn backward_union_property() {
        let net = BlockNet::build(&small_arch(), 5).unwrap();
        let (x, y) = random_batch(6, 5, 4, 2);
        let arch = net.arch();
        let both = net
            .backward_selected(
                &BlockSelection::parse("block2+fc", arch, true).unwrap(),
                &x,
                &y,
            )
            .unwrap();
        let b2 = net
            .backward_selected(
                &BlockSelection::parse("block2", arch, true).unwrap(),
                &x,
                &y,
            )
            .unwrap();
        let fc = net
            .backward_selected(&BlockSelection::parse("fc", arch, true).unwrap(), &x, &y)
            .unwrap();
        let mut union = b2.grads.clone();
        union.extend(fc.grads.clone());
        assert_eq!(both.grads, union);
    }

    #[test]
    fn backward_rejects_empty_selection() {
        let net = BlockNet::build(&small_arch(), 5).unwrap();
        let (x, y) = random_batch(2, 5, 4, 2);
        let r = net.backward_selected(&BlockSelection::empty(), &x, &y);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let net = BlockNet::build(&small_arch(), 6).unwrap();
        assert_eq!(net.inject_noise(BlockId::Res(1), 0.0, 3).unwrap(), net);
    }

    #[test]
    fn noise_is_isolated_and_deterministic() {
        let net = BlockNet::build(&small_arch(), 6).unwrap();
        let noisy = net.inject_noise(BlockId::Res(1), 0.5, 3).unwrap();
        for id in net.block_ids() {
            let same = net.block_digest(id) == noisy.block_digest(id);
            assert_eq!(same, id != BlockId::Res(1), "{id}");
        }
        assert_eq!(noisy, net.inject_noise(BlockId::Res(1), 0.5, 3).unwrap());
        // biases are perturbed too
        assert!(noisy.layers(BlockId::Res(1))[0].b.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn noise_rejects_unknown_block_and_negative_sigma() {
        let net = BlockNet::build(&small_arch(), 6).unwrap();
        assert!(matches!(
            net.inject_noise(BlockId::Res(7), 0.1, 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            net.inject_noise(BlockId::Fc, -0.1, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn param_counts() {
        let arch = ArchSpec {
            input_dim: 8,
            hidden_dim: 32,
            n_res_blocks: 3,
            n_classes: 5,
            layers_per_block: 2,
        };
        let net = BlockNet::build(&arch, 0).unwrap();
        let fc = BlockSelection::parse("fc", &arch, true).unwrap();
        assert_eq!(net.trainable_param_count(&fc), 165);
        assert_eq!(net.trainable_param_count(&BlockSelection::empty()), 0);
        let singles: usize = arch
            .block_ids()
            .into_iter()
            .map(|id| net.trainable_param_count(&BlockSelection::new(id.to_string(), [id])))
            .sum();
        assert_eq!(
            singles,
            net.trainable_param_count(&BlockSelection::full(&arch))
        );
        assert_eq!(singles, 8 * 32 + 32 + 3 * 2 * (32 * 32 + 32) + 165);
    }

    #[test]
    fn selection_parsing() {
        let arch = ArchSpec::default();
        let s = BlockSelection::parse("block1", &arch, true).unwrap();
        assert_eq!(
            s.ids,
            [BlockId::Stem, BlockId::Res(0)].into_iter().collect()
        );
        assert_eq!(
            BlockSelection::parse("full", &arch, true)
                .unwrap()
                .ids
                .len(),
            5
        );
        assert!(BlockSelection::parse("block4", &arch, true).is_err());
        let combo = BlockSelection::parse("block2+fc", &arch, true).unwrap();
        assert_eq!(combo.front(), Some(BlockId::Res(1)));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = BlockNet::build(&ArchSpec::default(), 11)
            .unwrap()
            .inject_noise(BlockId::Res(2), 0.37, 1)
            .unwrap();
        net.save(&path).unwrap();
        let back = BlockNet::load(&path).unwrap();
        assert_eq!(back.digest(), net.digest());
        assert_eq!(back.seed(), 11);
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        BlockNet::build(&small_arch(), 1)
            .unwrap()
            .save(&path)
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered =
            text.replacen("\"seed\":1", "\"seed\":2", 1)
                .replacen("\"b\":[0.0", "\"b\":[1.0", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(BlockNet::load(&path).is_err());
    }
}
