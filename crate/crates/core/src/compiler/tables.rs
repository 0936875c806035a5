use crate::error::{Error, Result};
use crate::program::{Mat, MatKind};
use crate::quant::{requantize, QuantParams, QuantizedLayer, Requantizer};

pub const DEFAULT_TABLE_CAP: u64 = 1 << 16;

fn capacity(table: &str, entries: u64, cap: u64) -> Result<()> {
    if entries > cap {
        return Err(Error::Capacity { table: table.to_string(), entries, cap });
    }
    Ok(())
}

pub fn empty_mult_table() -> Mat {
    Mat::new("mult", MatKind::Multiplication, &["w_off", "x_off"], &["product"])
}

/// Products of every `(q_w - Z_w, q_x - Z_x)` offset pair.
pub fn build_mult_table(p_w: &QuantParams, p_x: &QuantParams, cap: u64) -> Result<Mat> {
    let mut m = empty_mult_table();
    extend_mult_table(&mut m, p_w, p_x, cap)?;
    Ok(m)
}

/// Add one layer's offset rectangle to a shared multiplication table.
pub fn extend_mult_table(m: &mut Mat, p_w: &QuantParams, p_x: &QuantParams, cap: u64) -> Result<()> {
    let (wl, wh) = p_w.offset_range();
    let (xl, xh) = p_x.offset_range();
    let n = (i64::from(wh - wl) + 1) as u64 * (i64::from(xh - xl) + 1) as u64;
    capacity("mult", n, cap)?;
    for w in wl..=wh {
        for x in xl..=xh {
            m.entries.insert(vec![i64::from(w), i64::from(x)], vec![i64::from(w) * i64::from(x)]);
        }
    }
    Ok(())
}

/// Reachable span of the biased accumulator of a layer over all inputs in
/// the input params' code range.
pub fn acc_range(layer: &QuantizedLayer) -> (i64, i64) {
    let (xl, xh) = layer.input.offset_range();
    let (xl, xh) = (i64::from(xl), i64::from(xh));
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for o in 0..layer.out_dim {
        let (mut a, mut b) = (i64::from(layer.biases[o]), i64::from(layer.biases[o]));
        for i in 0..layer.in_dim {
            let w = i64::from(layer.weight_offset(o, i));
            a += (w * xl).min(w * xh);
            b += (w * xl).max(w * xh);
        }
        lo = lo.min(a);
        hi = hi.max(b);
    }
    (lo, hi)
}

pub fn empty_quant_table() -> Mat {
    Mat::new("quant", MatKind::Quantization, &["layer_index", "acc"], &["q"])
}

/// Requantized code of every accumulator value in `range`, keyed by
/// `[layer, acc]`.
pub fn build_quant_table(layer: usize, req: &Requantizer, range: (i64, i64), cap: u64) -> Result<Mat> {
    let (lo, hi) = range;
    let n = u64::try_from(hi - lo + 1).unwrap_or(0);
    capacity("quant", n, cap)?;
    let mut m = empty_quant_table();
    for acc in lo..=hi {
        m.entries.insert(vec![layer as i64, acc], vec![i64::from(req.apply(acc))]);
    }
    Ok(m)
}

pub fn empty_threshold_table() -> Mat {
    Mat::new("thresh", MatKind::Quantization, &["layer_index", "code"], &["min_acc"])
}

/// For every code `c > q_min`: the smallest accumulator in `range` whose
/// requantized value is at least `c`, or `hi + 1` when none is.
pub fn build_threshold_table(layer: usize, req: &Requantizer, range: (i64, i64)) -> Mat {
    let mut m = empty_threshold_table();
    let (lo, hi) = range;
    let f = |acc: i64| requantize(acc, req.m0, req.shift, req.zero_point, req.q_min, req.q_max);
    for code in (req.q_min + 1)..=req.q_max {
        let (mut a, mut b) = (lo, hi + 1);
        while a < b {
            let mid = a + (b - a) / 2;
            if f(mid) >= code {
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        m.entries.insert(vec![layer as i64, i64::from(code)], vec![a]);
    }
    m
}

/// Reference evaluation of the threshold search the pipeline performs.
pub fn threshold_lookup(m: &Mat, layer: usize, q_min: i32, bits: u32, acc: i64) -> Option<i32> {
    let mut res = q_min;
    for k in (0..bits).rev() {
        let cand = res + (1 << k);
        let t = m.get(&[layer as i64, i64::from(cand)])?[0];
        if acc >= t {
            res = cand;
        }
    }
    Some(res)
}
