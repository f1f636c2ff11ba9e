//! Network pieces: dense blocks, deformable dense blocks, the residual stack
//! of six of them, the stage-1 U-Net and the stage-2 patch classifier.
//!
//! Architectures only hold geometry and parameter names; weights live in a
//! [`ParamStore`] so optimizers can update them in place. A deformable block
//! uses the same main-weight names as its standard twin and adds an
//! `*.offset.*` predictor, so one store can drive both variants.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, BnStats, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Number of dense-style blocks in one residual stack.
pub const RDB_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub growth: usize,
    /// 1-based indices of the blocks that are deformable.
    pub ddb_positions: BTreeSet<usize>,
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            growth: 16,
            ddb_positions: BTreeSet::new(),
            levels: 3,
            base_channels: 16,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.growth == 0 {
            return Err(Error::invalid("growth must be >= 1"));
        }
        if self.levels < 2 {
            return Err(Error::invalid("levels must be >= 2"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if let Some(bad) = self.ddb_positions.iter().find(|&&p| p == 0 || p > RDB_BLOCKS) {
            return Err(Error::invalid(format!("ddb position {bad} outside 1..={RDB_BLOCKS}")));
        }
        Ok(())
    }

    /// Table-style label: `Non-DDB`, `1-DDB`, `1,2-DDB`, ...
    pub fn ddb_label(&self) -> String {
        ddb_label(&self.ddb_positions)
    }
}

pub fn ddb_label(positions: &BTreeSet<usize>) -> String {
    if positions.is_empty() {
        "Non-DDB".to_string()
    } else {
        let list: Vec<String> = positions.iter().map(usize::to_string).collect();
        format!("{}-DDB", list.join(","))
    }
}

/// Parse `Non-DDB`, `none`, `1,2` or `1,2-DDB`.
pub fn parse_ddb_positions(s: &str) -> Result<BTreeSet<usize>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("non-ddb") || s.eq_ignore_ascii_case("none") {
        return Ok(BTreeSet::new());
    }
    let body = s.strip_suffix("-DDB").or_else(|| s.strip_suffix("-ddb")).unwrap_or(s);
    body.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad ddb position `{p}` in `{s}`")))
        })
        .collect()
}

// ---- parameter registration ---------------------------------------------

fn he(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), he(rng, &[cout, cin, k, k]))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
}

fn add_offset_predictor(store: &mut ParamStore, name: &str, cin: usize, k: usize) -> Result<()> {
    let taps = k * k;
    store.insert(format!("{name}.offset.weight"), Tensor::zeros(&[2 * taps, cin, k, k]))?;
    store.insert(format!("{name}.offset.bias"), Tensor::zeros(&[2 * taps]))
}

fn add_bn(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
    store.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
    store.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0))
}

// ---- forward helpers ----------------------------------------------------

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, padding: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), 1, padding)
}

fn deform_conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let ow = g.param(store, &format!("{name}.offset.weight"))?;
    let ob = g.param(store, &format!("{name}.offset.bias"))?;
    let offsets = g.conv2d(x, ow, Some(ob), 1, 1)?;
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.deform_conv2d(x, offsets, w, Some(b), 1, 1)
}

fn bn(g: &mut Graph, store: &ParamStore, name: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    let rm_name = format!("{name}.running_mean");
    let rv_name = format!("{name}.running_var");
    let stats = BnStats {
        name,
        mean: store.get(&rm_name)?.data(),
        var: store.get(&rv_name)?.data(),
    };
    g.batch_norm(x, gamma, beta, stats, mode)
}

fn conv_bn_relu(g: &mut Graph, store: &ParamStore, name: &str, x: Var, mode: Mode) -> Result<Var> {
    let y = conv(g, store, &format!("{name}.conv"), x, 1)?;
    let y = bn(g, store, &format!("{name}.bn"), y, mode)?;
    Ok(g.relu(y))
}

fn check_channels(g: &Graph, x: Var, expect: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != expect {
        return Err(Error::shape(op, format!("expected {expect} channels, input is {s:?}")));
    }
    Ok(())
}

// ---- dense blocks -------------------------------------------------------

/// Parameters of one dense block named `prefix`, taking `in_channels` inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub prefix: String,
    pub in_channels: usize,
    pub growth: usize,
    pub deformable: bool,
}

impl DenseBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = &self.prefix;
        add_conv(store, rng, &format!("{p}.conv1"), self.in_channels, self.growth, 3)?;
        if self.deformable {
            add_offset_predictor(store, &format!("{p}.conv1"), self.in_channels, 3)?;
        }
        add_bn(store, &format!("{p}.bn1"), self.growth)?;
        add_conv(store, rng, &format!("{p}.conv2"), self.growth, self.growth, 3)?;
        add_bn(store, &format!("{p}.bn2"), self.growth)
    }
}

/// `concat(x, f2(f1(x)))` with `f_i = conv3x3 -> batch norm -> relu`.
pub fn dense_block(g: &mut Graph, store: &ParamStore, spec: &DenseBlockSpec, x: Var, mode: Mode) -> Result<Var> {
    check_channels(g, x, spec.in_channels, "dense_block")?;
    dense_block_impl(g, store, spec, x, mode, false)
}

/// [`dense_block`] whose first convolution samples at learned offsets.
pub fn deformable_dense_block(
    g: &mut Graph,
    store: &ParamStore,
    spec: &DenseBlockSpec,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    check_channels(g, x, spec.in_channels, "deformable_dense_block")?;
    dense_block_impl(g, store, spec, x, mode, true)
}

fn dense_block_impl(
    g: &mut Graph,
    store: &ParamStore,
    spec: &DenseBlockSpec,
    x: Var,
    mode: Mode,
    deformable: bool,
) -> Result<Var> {
    let p = &spec.prefix;
    let y = if deformable {
        deform_conv(g, store, &format!("{p}.conv1"), x)?
    } else {
        conv(g, store, &format!("{p}.conv1"), x, 1)?
    };
    let y = bn(g, store, &format!("{p}.bn1"), y, mode)?;
    let y = g.relu(y);
    let y = conv(g, store, &format!("{p}.conv2"), y, 1)?;
    let y = bn(g, store, &format!("{p}.bn2"), y, mode)?;
    let y = g.relu(y);
    g.concat(&[x, y])
}

/// Six dense-style blocks, a 1x1 projection back to the input width and an
/// additive skip: `out = x + proj(blocks(x))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RdbSpec {
    pub prefix: String,
    pub channels: usize,
    pub growth: usize,
    pub ddb_positions: BTreeSet<usize>,
}

impl RdbSpec {
    pub fn blocks(&self) -> Vec<DenseBlockSpec> {
        (1..=RDB_BLOCKS)
            .map(|i| DenseBlockSpec {
                prefix: format!("{}.block{i}", self.prefix),
                in_channels: self.channels + (i - 1) * self.growth,
                growth: self.growth,
                deformable: self.ddb_positions.contains(&i),
            })
            .collect()
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for b in self.blocks() {
            b.register(store, rng)?;
        }
        let wide = self.channels + RDB_BLOCKS * self.growth;
        add_conv(store, rng, &format!("{}.proj", self.prefix), wide, self.channels, 1)
    }
}

pub fn deformable_rdb(g: &mut Graph, store: &ParamStore, spec: &RdbSpec, x: Var, mode: Mode) -> Result<Var> {
    check_channels(g, x, spec.channels, "deformable_rdb")?;
    let mut y = x;
    for b in spec.blocks() {
        y = if b.deformable {
            deformable_dense_block(g, store, &b, y, mode)?
        } else {
            dense_block(g, store, &b, y, mode)?
        };
    }
    let proj = conv(g, store, &format!("{}.proj", spec.prefix), y, 0)?;
    g.add(x, proj)
}

// ---- stage 1: U-Net -----------------------------------------------------

/// Encoder-decoder detector emitting a per-pixel nodule probability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNet {
    pub config: BlockConfig,
}

impl UNet {
    fn width(&self, level: usize) -> usize {
        self.config.base_channels << level
    }

    fn rdb(&self, level: usize) -> RdbSpec {
        RdbSpec {
            prefix: format!("enc{level}.rdb"),
            channels: self.width(level),
            growth: self.config.growth,
            ddb_positions: self.config.ddb_positions.clone(),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &self.config;
        add_conv(store, rng, "stem.conv", c.in_channels, c.base_channels, 3)?;
        add_bn(store, "stem.bn", c.base_channels)?;
        for level in 0..c.levels {
            if level > 0 {
                add_conv(
                    store,
                    rng,
                    &format!("enc{level}.down.conv"),
                    self.width(level - 1),
                    self.width(level),
                    3,
                )?;
                add_bn(store, &format!("enc{level}.down.bn"), self.width(level))?;
            }
            self.rdb(level).register(store, rng)?;
        }
        let deepest = self.width(c.levels - 1);
        add_conv(store, rng, "bottleneck.conv", deepest, 2 * deepest, 3)?;
        add_bn(store, "bottleneck.bn", 2 * deepest)?;
        let mut below = 2 * deepest;
        for level in (0..c.levels).rev() {
            let w = self.width(level);
            add_conv(store, rng, &format!("dec{level}.up.conv"), below, w, 3)?;
            add_bn(store, &format!("dec{level}.up.bn"), w)?;
            add_conv(store, rng, &format!("dec{level}.fuse.conv"), 2 * w, w, 3)?;
            add_bn(store, &format!("dec{level}.fuse.bn"), w)?;
            below = w;
        }
        add_conv(store, rng, "head", c.base_channels, 1, 1)
    }

    /// Logits of the probability map, `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let c = &self.config;
        let (_, cin, h, w) = g.value(x).dims4()?;
        if cin != c.in_channels {
            return Err(Error::shape(
                "unet",
                format!("expected {} input channels, got {cin}", c.in_channels),
            ));
        }
        let div = 1usize << c.levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape("unet", format!("input {h}x{w} not divisible by {div}")));
        }
        let mut y = conv_bn_relu(g, store, "stem", x, mode)?;
        let mut skips = Vec::with_capacity(c.levels);
        for level in 0..c.levels {
            if level > 0 {
                y = conv_bn_relu(g, store, &format!("enc{level}.down"), y, mode)?;
            }
            y = deformable_rdb(g, store, &self.rdb(level), y, mode)?;
            skips.push(y);
            y = g.max_pool2d(y, 2)?;
        }
        y = conv_bn_relu(g, store, "bottleneck", y, mode)?;
        for level in (0..c.levels).rev() {
            let up = g.upsample2x(y)?;
            let up = conv_bn_relu(g, store, &format!("dec{level}.up"), up, mode)?;
            let cat = g.concat(&[skips[level], up])?;
            y = conv_bn_relu(g, store, &format!("dec{level}.fuse"), cat, mode)?;
        }
        conv(g, store, "head", y, 0)
    }

    /// Probability map, `sigmoid` of [`UNet::forward`].
    pub fn forward_probs(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let z = self.forward(g, store, x, mode)?;
        Ok(g.sigmoid(z))
    }

    /// Eval-mode probability maps without keeping a graph around.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let z = self.forward(&mut g, store, x, Mode::Eval)?;
        let data = g.value(z).data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(g.shape(z), data)
    }

    pub fn describe(&self, store: &ParamStore) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "model = unet");
        let _ = writeln!(s, "levels = {}", c.levels);
        let _ = writeln!(s, "base_channels = {}", c.base_channels);
        let _ = writeln!(s, "growth = {}", c.growth);
        let _ = writeln!(s, "ddb = {}", c.ddb_label());
        let _ = writeln!(s, "trainable_parameters = {}", store.count_trainable());
        describe_store(&mut s, store);
        s
    }
}

pub fn build_unet(config: &BlockConfig, seed: u64) -> Result<(UNet, ParamStore)> {
    config.validate()?;
    let net = UNet { config: config.clone() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.register(&mut store, &mut rng)?;
    Ok((net, store))
}

// ---- stage 2: patch classifier -----------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FprConfig {
    pub patch: usize,
    pub stem_channels: usize,
    pub growth: usize,
}

impl Default for FprConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            stem_channels: 8,
            growth: 8,
        }
    }
}

/// Stem (conv, batch norm, relu, 2x2 pool), two dense blocks, dual pooling
/// and a two-way linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FprCnn {
    pub config: FprConfig,
}

impl FprCnn {
    fn blocks(&self) -> [DenseBlockSpec; 2] {
        let c = &self.config;
        [
            DenseBlockSpec {
                prefix: "db1".into(),
                in_channels: c.stem_channels,
                growth: c.growth,
                deformable: false,
            },
            DenseBlockSpec {
                prefix: "db2".into(),
                in_channels: c.stem_channels + c.growth,
                growth: c.growth,
                deformable: false,
            },
        ]
    }

    fn feature_channels(&self) -> usize {
        self.config.stem_channels + 2 * self.config.growth
    }

    /// `[N, 2]` class logits for `[N, 1, patch, patch]` inputs.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let p = self.config.patch;
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != p || s[3] != p {
            return Err(Error::shape("fpr_cnn", format!("expected [N, 1, {p}, {p}], got {s:?}")));
        }
        let n = s[0];
        let mut y = conv_bn_relu(g, store, "stem", x, mode)?;
        y = g.max_pool2d(y, 2)?;
        for b in self.blocks() {
            y = dense_block(g, store, &b, y, mode)?;
        }
        let pooled = dual_pool_head(g, y)?;
        debug_assert_eq!(g.shape(pooled), [n, 2 * self.feature_channels()]);
        let w = g.param(store, "fc.weight")?;
        let b = g.param(store, "fc.bias")?;
        g.linear(pooled, w, b)
    }

    /// Eval-mode nodule probability (softmax class 1) per patch.
    pub fn predict(&self, store: &ParamStore, patches: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let z = self.forward(&mut g, store, x, Mode::Eval)?;
        Ok(g.value(z)
            .data()
            .chunks_exact(2)
            .map(|r| sigmoid(r[1] - r[0]))
            .collect())
    }

    pub fn describe(&self, store: &ParamStore) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "model = fpr_cnn");
        let _ = writeln!(s, "patch = {}", c.patch);
        let _ = writeln!(s, "stem_channels = {}", c.stem_channels);
        let _ = writeln!(s, "growth = {}", c.growth);
        let _ = writeln!(s, "trainable_parameters = {}", store.count_trainable());
        describe_store(&mut s, store);
        s
    }
}

pub fn build_fpr_cnn(config: &FprConfig, seed: u64) -> Result<(FprCnn, ParamStore)> {
    if config.patch < 8 || !config.patch.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "patch size {} must be a multiple of 4 and >= 8",
            config.patch
        )));
    }
    if config.stem_channels == 0 || config.growth == 0 {
        return Err(Error::invalid("fpr channel counts must be >= 1"));
    }
    let net = FprCnn { config: config.clone() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_conv(&mut store, &mut rng, "stem.conv", 1, config.stem_channels, 3)?;
    add_bn(&mut store, "stem.bn", config.stem_channels)?;
    for b in net.blocks() {
        b.register(&mut store, &mut rng)?;
    }
    let f = 2 * net.feature_channels();
    store.insert("fc.weight", Tensor::randn(&[2, f], (1.0 / f as f64).sqrt(), &mut rng))?;
    store.insert("fc.bias", Tensor::zeros(&[2]))?;
    Ok((net, store))
}

/// Whole-map max pooling next to max pooling over the central half window:
/// `[N, C, H, W] -> [N, 2C]`.
pub fn dual_pool_head(g: &mut Graph, features: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(features).dims4()?;
    if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "dual_pool_head",
            format!("needs even extents >= 4, got {h}x{w}"),
        ));
    }
    let whole = g.adaptive_max_pool(features, 1)?;
    let whole = g.reshape(whole, &[n, c])?;
    let (ch, cw) = (h / 2, w / 2);
    let centre = g.crop(features, (h - ch) / 2, (w - cw) / 2, ch, cw)?;
    let centre = g.adaptive_max_pool(centre, 1)?;
    let centre = g.reshape(centre, &[n, c])?;
    g.concat(&[whole, centre])
}

fn describe_store(s: &mut String, store: &ParamStore) {
    let _ = writeln!(s, "# tensors");
    for (name, t) in store.iter() {
        let _ = writeln!(s, "{name} {:?}", t.shape());
    }
}
