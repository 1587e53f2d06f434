//! Thread-local counters for multiply-accumulates and tensor buffer bytes.
//!
//! Every kernel in [`crate::tensor`] reports its cost through the closed-form
//! helpers in [`cost`]; tensor buffer allocation and release are reported by
//! the `Tensor` constructors and `Drop`. The profiler opens a [`measure`]
//! scope around a run and reads back the deltas. Counters are thread-local,
//! so concurrent measurements on different threads use independent sets.
//! Kernels never allocate tensors on worker threads, which keeps the peak
//! bookkeeping deterministic.

use std::cell::RefCell;

/// Counter deltas observed during one [`measure`] scope.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsDelta {
    /// Multiply-accumulate count (multiplies, divides, and transcendental
    /// evaluations each count one).
    pub macs: u64,
    /// Pure elementwise additions, each worth half a MAC. Reported
    /// separately and never folded into `macs`.
    pub half_add_macs: u64,
    /// Peak tensor-buffer bytes live above the level at scope entry.
    pub peak_bytes: u64,
}

struct Frame {
    macs0: u64,
    adds0: u64,
    live0: u64,
    peak: u64,
}

#[derive(Default)]
struct State {
    macs: u64,
    half_adds: u64,
    live_bytes: u64,
    frames: Vec<Frame>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

pub(crate) fn on_alloc(bytes: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.live_bytes += bytes;
        let live = s.live_bytes;
        for frame in &mut s.frames {
            let above = live - frame.live0.min(live);
            if above > frame.peak {
                frame.peak = above;
            }
        }
    });
}

pub(crate) fn on_free(bytes: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.live_bytes = s.live_bytes.saturating_sub(bytes);
    });
}

pub(crate) fn add_macs(n: u64) {
    STATE.with(|s| s.borrow_mut().macs += n);
}

pub(crate) fn add_half_adds(n: u64) {
    STATE.with(|s| s.borrow_mut().half_adds += n);
}

/// Bytes of tensor buffer currently live on this thread.
pub fn live_bytes() -> u64 {
    STATE.with(|s| s.borrow().live_bytes)
}

/// Run `f` and report the MACs, elementwise adds, and peak transient tensor
/// bytes it caused. Scopes nest; an inner scope's activity is also charged
/// to the outer one.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, MetricsDelta) {
    STATE.with(|s| {
        let mut st = s.borrow_mut();
        let frame = Frame {
            macs0: st.macs,
            adds0: st.half_adds,
            live0: st.live_bytes,
            peak: 0,
        };
        st.frames.push(frame);
    });
    let out = f();
    let delta = STATE.with(|s| {
        let mut st = s.borrow_mut();
        let frame = st.frames.pop().expect("measure scope imbalance");
        MetricsDelta {
            macs: st.macs - frame.macs0,
            half_add_macs: st.half_adds - frame.adds0,
            peak_bytes: frame.peak,
        }
    });
    (out, delta)
}

/// Closed-form cost of each kernel, in MACs and half-MAC adds.
///
/// These formulas are the single source of truth: the kernels charge exactly
/// these amounts at call time, and the profiler's analytic counts are built
/// from the same functions, so the two routes agree bit-for-bit.
pub mod cost {
    /// 1x1 convolution over (n, cin, h, w) producing cout channels.
    pub fn conv1x1_macs(n: u64, h: u64, w: u64, cin: u64, cout: u64) -> u64 {
        n * h * w * cin * cout
    }

    /// Bias add of a conv producing (n, cout, h, w).
    pub fn conv_bias_adds(n: u64, h: u64, w: u64, cout: u64) -> u64 {
        n * h * w * cout
    }

    /// Dense 3x3 valid convolution with output extent (hout, wout).
    pub fn conv3x3_macs(n: u64, hout: u64, wout: u64, cin: u64, cout: u64) -> u64 {
        n * hout * wout * cin * cout * 9
    }

    /// Depthwise 3x3 valid convolution.
    pub fn dwconv3x3_macs(n: u64, hout: u64, wout: u64, c: u64) -> u64 {
        n * hout * wout * c * 9
    }

    /// Matrix product (r x k) times (k x s).
    pub fn matmul_macs(r: u64, k: u64, s: u64) -> u64 {
        r * k * s
    }

    /// Softmax over `numel` entries: one exp and one divide per entry.
    pub fn softmax_macs(numel: u64) -> u64 {
        2 * numel
    }

    /// Softmax accumulation adds.
    pub fn softmax_adds(numel: u64) -> u64 {
        numel
    }

    /// Elementwise multiply or divide.
    pub fn elementwise_macs(numel: u64) -> u64 {
        numel
    }

    /// Elementwise add or subtract.
    pub fn elementwise_adds(numel: u64) -> u64 {
        numel
    }

    /// Integer power by repeated multiplication.
    pub fn powi_macs(numel: u64, exponent: u32) -> u64 {
        numel * u64::from(exponent.saturating_sub(1))
    }

    /// One transcendental (sqrt/exp/ln) per entry.
    pub fn unary_macs(numel: u64) -> u64 {
        numel
    }

    /// Channel-wise mean/variance normalization of (n, c, h, w).
    pub fn channel_norm_macs(n: u64, c: u64, h: u64, w: u64) -> u64 {
        // squaring during the variance pass + the final scale, plus one
        // sqrt and one reciprocal per channel
        2 * n * c * h * w + 2 * n * c
    }

    /// Adds of the two reduction passes plus the centering subtraction.
    pub fn channel_norm_adds(n: u64, c: u64, h: u64, w: u64) -> u64 {
        3 * n * c * h * w
    }

    /// Global average pool: accumulate everything, divide per channel.
    pub fn pool_avg_macs(n: u64, c: u64) -> u64 {
        n * c
    }

    pub fn pool_avg_adds(n: u64, c: u64, h: u64, w: u64) -> u64 {
        n * c * h * w
    }

    /// 2x2 average pool: accumulate input, scale output.
    pub fn avgpool2x2_macs(out_numel: u64) -> u64 {
        out_numel
    }

    pub fn avgpool2x2_adds(in_numel: u64) -> u64 {
        in_numel
    }

    /// Reduction adds for sums over C/H/W or over everything.
    pub fn sum_adds(numel: u64) -> u64 {
        numel
    }
}
