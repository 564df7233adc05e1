//! Transfer bridges: learnable 1×1 feature alignment on both the teacher
//! and the student side of a block, the squared-error transfer loss between
//! the aligned maps, and the unit-norm penalty on the alignment weights that
//! rules out the all-zero solution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Teacher => "teacher",
            Side::Student => "student",
        }
    }
}

/// A `[C_out, C_in]` channel-mixing matrix, applied as a 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FaWeights {
    pub weight: Tensor,
    pub side: Side,
    pub block_index: usize,
}

impl FaWeights {
    pub fn new(weight: Tensor, side: Side, block_index: usize) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "alignment weight must be [C_out, C_in], got {:?}",
                weight.shape()
            )));
        }
        Ok(Self {
            weight: weight.with_requires_grad(),
            side,
            block_index,
        })
    }

    /// Random rows rescaled to unit L2 norm, so the penalty starts at zero.
    pub fn random<R: Rng + ?Sized>(c_out: usize, c_in: usize, side: Side, block_index: usize, rng: &mut R) -> Self {
        let mut w = Tensor::uniform(&[c_out, c_in], -1.0, 1.0, rng);
        for row in w.data_mut().chunks_mut(c_in) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(w, side, block_index).expect("2-d weight")
    }

    pub fn identity(channels: usize, side: Side, block_index: usize) -> Self {
        let w = Tensor::from_fn(&[channels, channels], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        Self::new(w, side, block_index).expect("2-d weight")
    }

    pub fn zeros(c_out: usize, c_in: usize, side: Side, block_index: usize) -> Self {
        Self::new(Tensor::zeros(&[c_out, c_in]), side, block_index).expect("2-d weight")
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(fa_forward(tape.constant(&self.weight), tape.constant(features))?.value())
    }

    pub fn regularization(&self) -> f64 {
        let tape = Tape::new();
        weight_regularization(tape.constant(&self.weight))
            .expect("2-d weight")
            .item()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferBridge {
    pub teacher_fa: FaWeights,
    pub student_fa: FaWeights,
    pub block_index: usize,
}

impl TransferBridge {
    pub fn new(teacher_fa: FaWeights, student_fa: FaWeights) -> Result<Self> {
        if teacher_fa.c_out() != student_fa.c_out() {
            return Err(Error::Shape(format!(
                "teacher side aligns to {} channels, student side to {}",
                teacher_fa.c_out(),
                student_fa.c_out()
            )));
        }
        if teacher_fa.block_index != student_fa.block_index {
            return Err(Error::Shape("bridge sides attach to different blocks".into()));
        }
        let block_index = teacher_fa.block_index;
        Ok(Self {
            teacher_fa,
            student_fa,
            block_index,
        })
    }

    /// Teacher side random unit rows, student side identity; aligned width
    /// is the student block's channel count.
    pub fn init<R: Rng + ?Sized>(teacher_channels: usize, student_channels: usize, block_index: usize, rng: &mut R) -> Self {
        Self::new(
            FaWeights::random(student_channels, teacher_channels, Side::Teacher, block_index, rng),
            FaWeights::identity(student_channels, Side::Student, block_index),
        )
        .expect("matching aligned widths")
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BridgeVars<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        BridgeVars {
            teacher_fa: leaf(&self.teacher_fa.weight),
            student_fa: leaf(&self.student_fa.weight),
        }
    }

    /// `(l_a, l_reg)` for concrete feature maps.
    pub fn block_loss(&self, student_feats: &Tensor, teacher_feats: &Tensor) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let l = bridge_block_loss(vars, tape.constant(student_feats), tape.constant(teacher_feats))?;
        Ok((l.l_a.item(), l.l_reg.item()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BridgeVars<'t> {
    pub teacher_fa: Var<'t>,
    pub student_fa: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockLoss<'t> {
    pub l_a: Var<'t>,
    pub l_reg: Var<'t>,
}

/// Aligned map: channel `c` is `sum_c' w[c, c'] * features[c']` per pixel.
pub fn fa_forward<'t>(weight: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let ws = weight.shape();
    let fs = features.shape();
    if ws.len() != 2 || fs.len() != 4 || fs[1] != ws[1] {
        return Err(Error::Shape(format!(
            "alignment weight {ws:?} cannot consume features {fs:?}"
        )));
    }
    features.conv2d(weight.reshape(&[ws[0], ws[1], 1, 1])?, 1, 0)
}

/// Mean squared difference over channels, pixels and batch.
pub fn transfer_loss<'t>(aligned_student: Var<'t>, aligned_teacher: Var<'t>) -> Result<Var<'t>> {
    aligned_student.sub(aligned_teacher)?.square()?.mean()
}

/// `(1/C_out) * sum_j (sum_i w[j, i]^2 - 1)^2` over output channels `j`
/// and input channels `i`.
pub fn weight_regularization(weight: Var<'_>) -> Result<Var<'_>> {
    if weight.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "alignment weight must be [C_out, C_in], got {:?}",
            weight.shape()
        )));
    }
    weight.square()?.sum_axes(&[1])?.add_scalar(-1.0)?.square()?.mean()
}

/// Transfer loss between both aligned maps plus the penalty on both sides'
/// alignment weights.
pub fn bridge_block_loss<'t>(bridge: BridgeVars<'t>, student_feats: Var<'t>, teacher_feats: Var<'t>) -> Result<BlockLoss<'t>> {
    let s = fa_forward(bridge.student_fa, student_feats)?;
    let t = fa_forward(bridge.teacher_fa, teacher_feats)?;
    let l_a = transfer_loss(s, t)?;
    let l_reg = weight_regularization(bridge.teacher_fa)?.add(weight_regularization(bridge.student_fa)?)?;
    Ok(BlockLoss { l_a, l_reg })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::check_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pixel_matmul(w: &Tensor, x: &Tensor) -> Tensor {
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let (n, hw) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
        let mut out = vec![0.0; n * co * hw];
        for b in 0..n {
            for p in 0..hw {
                for c in 0..co {
                    out[(b * co + c) * hw + p] =
                        (0..ci).map(|k| w.data()[c * ci + k] * x.data()[(b * ci + k) * hw + p]).sum();
                }
            }
        }
        Tensor::new(&[n, co, x.shape()[2], x.shape()[3]], out).unwrap()
    }

    #[test]
    fn identity_and_zero_alignment() {
        let x = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng(1));
        assert_eq!(FaWeights::identity(4, Side::Student, 0).forward(&x).unwrap(), x);
        let z = FaWeights::zeros(5, 4, Side::Teacher, 0).forward(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alignment_matches_pixel_matmul() {
        let mut r = rng(2);
        let fa = FaWeights::new(Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r), Side::Teacher, 0).unwrap();
        let x = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut r);
        assert!(fa.forward(&x).unwrap().max_abs_diff(&pixel_matmul(&fa.weight, &x)) < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(FaWeights::identity(4, Side::Student, 0).forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn transfer_loss_values() {
        let tape = Tape::new();
        let a = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(3));
        let va = tape.constant(&a);
        assert_eq!(transfer_loss(va, va).unwrap().item(), 0.0);
        let shifted = tape.constant(&a).add_scalar(0.5).unwrap();
        assert!((transfer_loss(shifted, va).unwrap().item() - 0.25).abs() < 1e-15);
        let bad = tape.constant(&Tensor::zeros(&[2, 3, 4, 3]));
        assert!(matches!(transfer_loss(va, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn regularization_values() {
        assert_eq!(FaWeights::zeros(3, 5, Side::Teacher, 0).regularization(), 1.0);
        assert_eq!(FaWeights::identity(4, Side::Student, 0).regularization(), 0.0);
        let w = Tensor::new(&[2, 2], vec![0.6, 0.8, 0.0, 1.0]).unwrap();
        assert_eq!(FaWeights::new(w, Side::Teacher, 0).unwrap().regularization(), 0.0);
    }

    #[test]
    fn regularization_gradient_matches_hand_derivation() {
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng(4));
        let tape = Tape::new();
        let v = tape.param(&w);
        let g = tape.backward(weight_regularization(v).unwrap()).unwrap();
        let g = g.get(v).unwrap();
        for j in 0..3 {
            let row = &w.data()[j * 5..(j + 1) * 5];
            let norm2: f64 = row.iter().map(|x| x * x).sum();
            for i in 0..5 {
                let want = 4.0 * row[i] * (norm2 - 1.0) / 3.0;
                assert!((g[j * 5 + i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_bridge_is_penalized() {
        let x = Tensor::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng(5));
        let ident = TransferBridge::new(
            FaWeights::identity(4, Side::Teacher, 0),
            FaWeights::identity(4, Side::Student, 0),
        )
        .unwrap();
        assert_eq!(ident.block_loss(&x, &x).unwrap(), (0.0, 0.0));
        let zero = TransferBridge::new(
            FaWeights::zeros(4, 4, Side::Teacher, 0),
            FaWeights::zeros(4, 4, Side::Student, 0),
        )
        .unwrap();
        assert_eq!(zero.block_loss(&x, &x).unwrap(), (0.0, 2.0));
    }

    #[test]
    fn block_loss_is_composition() {
        let mut r = rng(6);
        let bridge = TransferBridge::init(6, 4, 0, &mut r);
        let s = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r);
        let t = Tensor::uniform(&[2, 6, 3, 3], -1.0, 1.0, &mut r);
        let (l_a, l_reg) = bridge.block_loss(&s, &t).unwrap();
        let tape = Tape::new();
        let a_s = fa_forward(tape.constant(&bridge.student_fa.weight), tape.constant(&s)).unwrap();
        let a_t = fa_forward(tape.constant(&bridge.teacher_fa.weight), tape.constant(&t)).unwrap();
        assert_eq!(l_a.to_bits(), transfer_loss(a_s, a_t).unwrap().item().to_bits());
        let want = bridge.teacher_fa.regularization() + bridge.student_fa.regularization();
        assert_eq!(l_reg.to_bits(), want.to_bits());
    }

    #[test]
    fn mismatched_bridge_sides() {
        let err = TransferBridge::new(
            FaWeights::zeros(4, 6, Side::Teacher, 0),
            FaWeights::zeros(3, 3, Side::Student, 0),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn bridge_gradients() {
        let mut r = rng(7);
        let inputs = vec![
            Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r),
            Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r),
            Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r),
            Tensor::uniform(&[2, 5, 2, 2], -1.0, 1.0, &mut r),
        ];
        let err = check_gradients(&inputs, 1e-5, |_, v| {
            let l = bridge_block_loss(
                BridgeVars {
                    teacher_fa: v[0],
                    student_fa: v[1],
                },
                v[2],
                v[3],
            )?;
            l.l_a.add(l.l_reg)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[cfg(test)]
mod proptests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn alignment_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let fa = FaWeights::random(3, 4, Side::Teacher, 0, &mut r);
            let x = Tensor::uniform(&[1, 4, 2, 3], -1.0, 1.0, &mut r);
            let y = Tensor::uniform(&[1, 4, 2, 3], -1.0, 1.0, &mut r);
            let mix = Tensor::from_fn(x.shape(), |i| alpha * x.data()[i] + beta * y.data()[i]);
            let (fx, fy) = (fa.forward(&x).unwrap(), fa.forward(&y).unwrap());
            let lhs = fa.forward(&mix).unwrap();
            let rhs = Tensor::from_fn(fx.shape(), |i| alpha * fx.data()[i] + beta * fy.data()[i]);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn losses_are_non_negative(seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bridge = TransferBridge::init(5, 3, 0, &mut r);
            let s = Tensor::uniform(&[2, 3, 2, 2], -3.0, 3.0, &mut r);
            let t = Tensor::uniform(&[2, 5, 2, 2], -3.0, 3.0, &mut r);
            let (l_a, l_reg) = bridge.block_loss(&s, &t).unwrap();
            prop_assert!(l_a >= 0.0 && l_reg >= 0.0);
        }
    }
}
