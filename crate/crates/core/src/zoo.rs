//! The eight compared architectures as concrete layer graphs over
//! 128x128 single-channel input with ten outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::nn::{
    softmax, BatchNorm2d, Census, Concat, Conv2d, Dense, Flatten, GlobalAvgPool, Layer, Pool2d, PoolMode, Relu,
    Residual, Scalar, Sequential, Shortcut, Standardize, Tensor,
};
use crate::preprocess::INPUT_SIDE;
use crate::seed::SeedBuilder;

/// Variance floor of the input standardization, about 2.5 gray levels.
pub const INPUT_VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    Crystalnet,
    Lcn,
    Alexnet,
    Vgg16,
    Vgg19,
    InceptionV3,
    Resnet32,
    Resnet56,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 8] = [
        ArchitectureId::Crystalnet,
        ArchitectureId::Lcn,
        ArchitectureId::Alexnet,
        ArchitectureId::Vgg16,
        ArchitectureId::Vgg19,
        ArchitectureId::InceptionV3,
        ArchitectureId::Resnet32,
        ArchitectureId::Resnet56,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureId::Crystalnet => "crystalnet",
            ArchitectureId::Lcn => "lcn",
            ArchitectureId::Alexnet => "alexnet",
            ArchitectureId::Vgg16 => "vgg16",
            ArchitectureId::Vgg19 => "vgg19",
            ArchitectureId::InceptionV3 => "inception_v3",
            ArchitectureId::Resnet32 => "resnet32",
            ArchitectureId::Resnet56 => "resnet56",
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

/// Table order.
pub fn list_architectures() -> Vec<ArchitectureId> {
    ArchitectureId::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: ArchitectureId,
    pub input_side: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: ArchitectureId, init_seed: u64) -> Self {
        Self {
            architecture,
            input_side: INPUT_SIDE,
            input_channels: 1,
            num_classes: NUM_CLASSES,
            init_seed,
        }
    }
}

pub struct Model {
    pub spec: ModelSpec,
    pub net: Sequential<f32>,
}

impl Model {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if spec.input_side != INPUT_SIDE || spec.input_channels != 1 || spec.num_classes != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "models take {INPUT_SIDE}x{INPUT_SIDE}x1 input with {NUM_CLASSES} outputs"
            )));
        }
        let mut rng = SeedBuilder::new("init")
            .str(spec.architecture.name())
            .u64(spec.init_seed)
            .rng();
        let net = build_net(spec.architecture, &mut rng);
        Ok(Self { spec, net })
    }

    pub fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let s = self.spec.input_side;
        let want = [self.spec.input_channels, s, s];
        if x.shape.len() != 4 || x.shape[1..] != want {
            return Err(Error::ShapeMismatch {
                expected: format!("[B, {}, {s}, {s}]", self.spec.input_channels),
                got: format!("{:?}", x.shape),
            });
        }
        Ok(())
    }

    /// Raw output-layer logits, `[B, 10]`.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        Ok(self.net.eval(x))
    }

    /// Softmax output-layer activations, `[B, 10]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.net)
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        self.net.census(&mut c);
        c
    }
}

/// Number of trainable scalars (running statistics excluded).
pub fn param_count<T: Scalar>(layer: &dyn Layer<T>) -> usize {
    let mut count = 0;
    // visit_params needs &mut; state visitation sees buffers too, so filter
    // those out by name.
    layer.visit_state(&mut |name, shape, _| {
        if !name.ends_with(".running_mean") && !name.ends_with(".running_var") {
            count += shape.iter().product::<usize>();
        }
    });
    count
}

/// Builds the layer graph of `arch`.
pub fn build_net<T: Scalar, R: Rng + ?Sized>(arch: ArchitectureId, rng: &mut R) -> Sequential<T> {
    let mut b = Builder { net: Sequential::new(arch.name()), rng, next: 0 };
    // Raw pixels sit in a narrow band around the drop's gray level; the
    // variance floor keeps featureless images from amplifying sensor noise.
    b.net.push(Standardize::new("input.standardize", INPUT_VARIANCE_FLOOR));
    match arch {
        ArchitectureId::Crystalnet => crystalnet(&mut b),
        ArchitectureId::Lcn => lcn(&mut b),
        ArchitectureId::Alexnet => alexnet(&mut b),
        ArchitectureId::Vgg16 => vgg(&mut b, &[2, 2, 3, 3, 3]),
        ArchitectureId::Vgg19 => vgg(&mut b, &[2, 2, 4, 4, 4]),
        ArchitectureId::InceptionV3 => inception_v3(&mut b),
        ArchitectureId::Resnet32 => resnet(&mut b, 5),
        ArchitectureId::Resnet56 => resnet(&mut b, 9),
    }
    b.net
}

struct Builder<'a, T, R: ?Sized> {
    net: Sequential<T>,
    rng: &'a mut R,
    next: usize,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn id(&mut self, kind: &str) -> String {
        self.next += 1;
        format!("{kind}{}", self.next)
    }

    /// Convolution with bias followed by ReLU.
    fn conv_relu(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize) {
        let name = self.id("conv");
        self.net.push(Conv2d::new(&name, cin, cout, (k, k), (s, s), (p, p), true, self.rng));
        self.net.push(Relu::new(format!("{name}.relu")));
    }

    fn max_pool(&mut self, k: usize, s: usize) {
        let name = self.id("pool");
        self.net.push(Pool2d::max(name, k, s));
    }

    fn dense(&mut self, cin: usize, cout: usize, relu: bool) {
        let name = self.id("fc");
        self.net.push(Dense::new(&name, cin, cout, self.rng));
        if relu {
            self.net.push(Relu::new(format!("{name}.relu")));
        }
    }

    fn flatten(&mut self) {
        let name = self.id("flatten");
        self.net.push(Flatten::new(name));
    }

    /// Fully connected head: `widths` hidden layers then the classifier.
    fn head(&mut self, features: usize, widths: &[usize]) {
        self.flatten();
        let mut cin = features;
        for &w in widths {
            self.dense(cin, w, true);
            cin = w;
        }
        self.dense(cin, NUM_CLASSES, false);
    }
}

fn crystalnet<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>) {
    b.conv_relu(1, 32, 5, 2, 2); // 64
    b.conv_relu(32, 64, 5, 2, 2); // 32
    b.conv_relu(64, 128, 3, 2, 1); // 16
    b.conv_relu(128, 128, 3, 2, 1); // 8
    b.head(128 * 8 * 8, &[1024, 512]);
}

fn lcn<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>) {
    b.conv_relu(1, 32, 5, 2, 2); // 64
    b.max_pool(2, 2); // 32
    b.conv_relu(32, 64, 5, 2, 2); // 16
    b.max_pool(2, 2); // 8
    b.conv_relu(64, 128, 3, 1, 1);
    b.conv_relu(128, 128, 3, 1, 1);
    b.conv_relu(128, 128, 3, 2, 1); // 4
    b.head(128 * 4 * 4, &[1024, 512, 256]);
}

fn alexnet<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>) {
    b.conv_relu(1, 96, 11, 4, 2); // 31
    b.max_pool(3, 2); // 15
    b.conv_relu(96, 256, 5, 1, 2);
    b.max_pool(3, 2); // 7
    b.conv_relu(256, 384, 3, 1, 1);
    b.conv_relu(384, 384, 3, 1, 1);
    b.conv_relu(384, 256, 3, 1, 1);
    b.max_pool(3, 2); // 3
    b.head(256 * 3 * 3, &[4096, 4096]);
}

fn vgg<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>, blocks: &[usize]) {
    let widths = [64, 128, 256, 512, 512];
    let mut cin = 1;
    for (&n, &w) in blocks.iter().zip(&widths) {
        for _ in 0..n {
            b.conv_relu(cin, w, 3, 1, 1);
            cin = w;
        }
        b.max_pool(2, 2);
    }
    // 128 / 2^5 = 4
    b.head(512 * 4 * 4, &[1024, 1024]);
}

/// Convolution without bias, batch normalization, ReLU.
fn bn_conv<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    seq: &mut Sequential<T>,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: (usize, usize),
) {
    seq.push(Conv2d::new(name, cin, cout, kernel, (stride, stride), padding, false, rng));
    seq.push(BatchNorm2d::new(format!("{name}.bn"), cout));
    seq.push(Relu::new(format!("{name}.relu")));
}

/// Branch description: `(out channels, kernel, stride, padding)` per conv.
type Branch = Vec<(usize, (usize, usize), usize, (usize, usize))>;

fn branch<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize, convs: &Branch) -> Sequential<T> {
    let mut seq = Sequential::new(name);
    let mut c = cin;
    for (i, &(cout, k, s, p)) in convs.iter().enumerate() {
        bn_conv(rng, &mut seq, &format!("{name}.{i}"), c, cout, k, s, p);
        c = cout;
    }
    seq
}

fn pool_branch<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize, cout: usize) -> Sequential<T> {
    let mut seq = Sequential::new(name);
    seq.push(Pool2d::new(format!("{name}.pool"), PoolMode::Avg, (3, 3), (1, 1), (1, 1)));
    bn_conv(rng, &mut seq, &format!("{name}.0"), cin, cout, (1, 1), 1, (0, 0));
    seq
}

const K1: (usize, usize) = (1, 1);
const K3: (usize, usize) = (3, 3);
const P0: (usize, usize) = (0, 0);
const P1: (usize, usize) = (1, 1);

fn inception_a<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize, pool: usize) -> Concat<T> {
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.b1"), cin, &vec![(64, K1, 1, P0)]),
            branch(rng, &format!("{name}.b5"), cin, &vec![(48, K1, 1, P0), (64, (5, 5), 1, (2, 2))]),
            branch(rng, &format!("{name}.b3"), cin, &vec![(64, K1, 1, P0), (96, K3, 1, P1), (96, K3, 1, P1)]),
            pool_branch(rng, &format!("{name}.bp"), cin, pool),
        ],
    )
}

fn reduction_a<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize) -> Concat<T> {
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.b3"), cin, &vec![(384, K3, 2, P0)]),
            branch(rng, &format!("{name}.bd"), cin, &vec![(64, K1, 1, P0), (96, K3, 1, P1), (96, K3, 2, P0)]),
            Sequential::new(format!("{name}.bp")).with(Pool2d::max(format!("{name}.bp.pool"), 3, 2)),
        ],
    )
}

/// Module with 7x7 convolutions factorized into 1x7 and 7x1.
fn inception_c<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize, c7: usize) -> Concat<T> {
    let (k17, p17, k71, p71) = ((1, 7), (0, 3), (7, 1), (3, 0));
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.b1"), cin, &vec![(192, K1, 1, P0)]),
            branch(rng, &format!("{name}.b7"), cin, &vec![(c7, K1, 1, P0), (c7, k17, 1, p17), (192, k71, 1, p71)]),
            branch(
                rng,
                &format!("{name}.bd"),
                cin,
                &vec![
                    (c7, K1, 1, P0),
                    (c7, k71, 1, p71),
                    (c7, k17, 1, p17),
                    (c7, k71, 1, p71),
                    (192, k17, 1, p17),
                ],
            ),
            pool_branch(rng, &format!("{name}.bp"), cin, 192),
        ],
    )
}

fn reduction_b<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize) -> Concat<T> {
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.b3"), cin, &vec![(192, K1, 1, P0), (320, K3, 2, P0)]),
            branch(
                rng,
                &format!("{name}.b7"),
                cin,
                &vec![(192, K1, 1, P0), (192, (1, 7), 1, (0, 3)), (192, (7, 1), 1, (3, 0)), (192, K3, 2, P0)],
            ),
            Sequential::new(format!("{name}.bp")).with(Pool2d::max(format!("{name}.bp.pool"), 3, 2)),
        ],
    )
}

/// 1x3 and 3x1 convolutions applied side by side to the same input.
fn split_pair<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize) -> Concat<T> {
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.a"), cin, &vec![(384, (1, 3), 1, (0, 1))]),
            branch(rng, &format!("{name}.b"), cin, &vec![(384, (3, 1), 1, (1, 0))]),
        ],
    )
}

fn inception_e<T: Scalar, R: Rng + ?Sized>(rng: &mut R, name: &str, cin: usize) -> Concat<T> {
    let mut b3: Sequential<T> = branch(rng, &format!("{name}.b3"), cin, &vec![(384, K1, 1, P0)]);
    b3.push(split_pair(rng, &format!("{name}.b3.split"), 384));
    let mut bd: Sequential<T> = branch(rng, &format!("{name}.bd"), cin, &vec![(448, K1, 1, P0), (384, K3, 1, P1)]);
    bd.push(split_pair(rng, &format!("{name}.bd.split"), 384));
    Concat::new(
        name,
        vec![
            branch(rng, &format!("{name}.b1"), cin, &vec![(320, K1, 1, P0)]),
            b3,
            bd,
            pool_branch(rng, &format!("{name}.bp"), cin, 192),
        ],
    )
}

fn inception_v3<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>) {
    let rng = &mut *b.rng;
    let net = &mut b.net;
    bn_conv(rng, net, "stem1", 1, 32, K3, 2, P0); // 63
    bn_conv(rng, net, "stem2", 32, 32, K3, 1, P0); // 61
    bn_conv(rng, net, "stem3", 32, 64, K3, 1, P1); // 61
    net.push(Pool2d::max("stem.pool1", 3, 2)); // 30
    bn_conv(rng, net, "stem4", 64, 80, K1, 1, P0);
    bn_conv(rng, net, "stem5", 80, 192, K3, 1, P0); // 28
    net.push(Pool2d::max("stem.pool2", 3, 2)); // 13
    net.push(inception_a(rng, "mixed5b", 192, 32)); // 256
    net.push(inception_a(rng, "mixed5c", 256, 64)); // 288
    net.push(inception_a(rng, "mixed5d", 288, 64)); // 288
    net.push(reduction_a(rng, "mixed6a", 288)); // 768 @ 6
    net.push(inception_c(rng, "mixed6b", 768, 128));
    net.push(inception_c(rng, "mixed6c", 768, 160));
    net.push(inception_c(rng, "mixed6d", 768, 160));
    net.push(inception_c(rng, "mixed6e", 768, 192));
    net.push(reduction_b(rng, "mixed7a", 768)); // 1280 @ 2
    net.push(inception_e(rng, "mixed7b", 1280)); // 2048
    net.push(inception_e(rng, "mixed7c", 2048));
    net.push(GlobalAvgPool::new("gap"));
    net.push(Dense::new("fc", 2048, NUM_CLASSES, rng));
}

/// Basic block: two 3x3 convolutions with batch normalization, summed with
/// a parameter-free shortcut, then ReLU.
fn resnet<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>, n: usize) {
    let rng = &mut *b.rng;
    let net = &mut b.net;
    bn_conv(rng, net, "stem", 1, 16, K3, 2, P1); // 64
    let mut cin = 16;
    for (stage, &width) in [16usize, 32, 64].iter().enumerate() {
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{}", stage + 1, block + 1);
            let mut body = Sequential::new(format!("{name}.body"));
            bn_conv(rng, &mut body, &format!("{name}.conv1"), cin, width, K3, stride, P1);
            body.push(Conv2d::new(format!("{name}.conv2"), width, width, K3, (1, 1), P1, false, rng));
            body.push(BatchNorm2d::new(format!("{name}.conv2.bn"), width));
            let shortcut = if stride == 1 && cin == width {
                Shortcut::Identity
            } else {
                Shortcut::Subsample { stride, out_channels: width }
            };
            net.push(Residual::new(&name, body, shortcut));
            net.push(Relu::new(format!("{name}.relu")));
            cin = width;
        }
    }
    net.push(GlobalAvgPool::new("gap"));
    net.push(Dense::new("fc", 64, NUM_CLASSES, rng));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(arch: ArchitectureId) -> Model {
        Model::build(ModelSpec::new(arch, 7)).unwrap()
    }

    #[test]
    fn registry_order() {
        let all = list_architectures();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], ArchitectureId::Crystalnet);
        assert_eq!(all[7], ArchitectureId::Resnet56);
        for a in all {
            assert_eq!(a.name().parse::<ArchitectureId>().unwrap(), a);
        }
        assert!(matches!("resnet101".parse::<ArchitectureId>(), Err(Error::UnknownArchitecture(_))));
    }

    #[test]
    fn crystalnet_and_lcn_census() {
        let c = model(ArchitectureId::Crystalnet).census();
        assert_eq!((c.conv, c.dense, c.pooling()), (4, 3, 0));
        let l = model(ArchitectureId::Lcn).census();
        assert_eq!((l.conv, l.dense, l.pooling()), (5, 4, 2));
        let ratio = model(ArchitectureId::Lcn).param_count() as f64 / model(ArchitectureId::Crystalnet).param_count() as f64;
        assert!(ratio < 0.6, "{ratio}");
    }

    #[test]
    fn resnet_depths() {
        let r32 = model(ArchitectureId::Resnet32).census();
        let r56 = model(ArchitectureId::Resnet56).census();
        assert_eq!(r32.weighted(), 32);
        assert_eq!(r56.weighted(), 56);
        assert_eq!(r32.residual, 15);
    }

    #[test]
    fn canonical_stacks() {
        let v16 = model(ArchitectureId::Vgg16).census();
        let v19 = model(ArchitectureId::Vgg19).census();
        let alex = model(ArchitectureId::Alexnet).census();
        assert_eq!((v16.conv, v16.dense), (13, 3));
        assert_eq!((v19.conv, v19.dense), (16, 3));
        assert_eq!((alex.conv, alex.dense), (5, 3));
        let inc = model(ArchitectureId::InceptionV3).census();
        assert_eq!(inc.concat, 11 + 4);
        assert_eq!(inc.dense, 1);
    }

    #[test]
    fn small_models_output_normalized_rows() {
        for arch in [ArchitectureId::Crystalnet, ArchitectureId::Lcn, ArchitectureId::Resnet32] {
            let m = model(arch);
            let x = Tensor::from_vec(&[2, 1, 128, 128], (0..2 * 128 * 128).map(|i| ((i % 97) as f32) / 97.0).collect());
            let y = m.forward(&x).unwrap();
            assert_eq!(y.shape, vec![2, 10]);
            assert!(y.all_finite());
            for row in y.data.chunks(10) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = model(ArchitectureId::Lcn);
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        assert!(matches!(m.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_depends_only_on_seed() {
        let a = Model::build(ModelSpec::new(ArchitectureId::Lcn, 3)).unwrap();
        let b = Model::build(ModelSpec::new(ArchitectureId::Lcn, 3)).unwrap();
        let c = Model::build(ModelSpec::new(ArchitectureId::Lcn, 4)).unwrap();
        let first = |m: &Model| {
            let mut v = Vec::new();
            m.net.visit_state(&mut |_, _, d| v.extend_from_slice(d));
            v
        };
        assert_eq!(first(&a), first(&b));
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net: Sequential<f64> = build_net(ArchitectureId::Resnet32, &mut rng);
        let x = Tensor::from_vec(&[1, 16, 8, 8], (0..1024).map(|i| (i as f64 * 0.13).sin()).collect());
        let mut checked = 0;
        for layer in net.layers.iter_mut() {
            if layer.kind() != crate::nn::LayerKind::Residual {
                continue;
            }
            let mut is_identity = true;
            layer.visit_state(&mut |name, shape, _| {
                if name.ends_with("conv1.weight") && shape[0] != shape[1] {
                    is_identity = false;
                }
            });
            if !is_identity {
                continue;
            }
            layer.visit_params(&mut |p| p.value.fill(0.0));
            let y = layer.eval(&x);
            for (a, b) in y.data.iter().zip(&x.data) {
                assert!((a - b).abs() < 1e-6);
            }
            checked += 1;
            break;
        }
        assert_eq!(checked, 1);
    }
}
