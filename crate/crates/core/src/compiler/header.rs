use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{LayerKind, ModelShape};
use crate::program::{HeaderLayout, Overlay, PipelineProgram};

use super::units::{modularize_shape, CapUnit};

/// `(conv_bits, fc_bits)` from the layer-group formulas.
///
/// Conv: `(C_out^k · ceil(T/2^k) + C_in^(k+1)) · b` for the conv layer `k`
/// with the largest output; when `k` is the last conv layer, `C_in^(k+1)` is
/// the input width of the first FC layer (0 without FC layers).
/// FC: `(T_in + T_out) · b` maximised over FC layers.
pub fn header_formula(shape: &ModelShape, bits: u32) -> (u64, u64) {
    let b = u64::from(bits);
    let layers = shape.layers();
    let convs: Vec<_> = layers.iter().filter(|l| l.kind == LayerKind::Conv).collect();
    let mut conv_bits = 0;
    if let Some(k) = convs
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |best, (n, l)| match best {
            Some((_, v)) if v >= l.output_size() => best,
            _ => Some((n, l.output_size())),
        })
        .map(|(n, _)| n)
    {
        let next = if k + 1 < convs.len() { convs[k + 1].in_dim } else { shape.fc.first().map_or(0, |&(i, _)| i) };
        conv_bits = (convs[k].output_size() + next) as u64 * b;
    }
    let fc_bits = shape.fc.iter().map(|&(i, o)| (i + o) as u64 * b).max().unwrap_or(0);
    (conv_bits, fc_bits)
}

/// Lay out feature slots for `shape` over its unit schedule.
///
/// The input tensor occupies slots `0..input_size`. Each output element gets
/// the lowest free slot at the unit that produces it; a slot frees once the
/// last unit reading its element has run. Final outputs stay live.
pub fn allocate_header(shape: &ModelShape, bits: u32) -> HeaderLayout {
    let units = modularize_shape(shape);
    allocate_with_units(shape, bits, &units)
}

pub(crate) fn allocate_with_units(shape: &ModelShape, bits: u32, units: &[CapUnit]) -> HeaderLayout {
    let sizes = shape.boundary_sizes();
    // Last unit reading each element of each tensor.
    let mut last_read: Vec<Vec<Option<usize>>> = sizes.iter().map(|&n| vec![None; n]).collect();
    for (u, unit) in units.iter().enumerate() {
        for &e in &unit.inputs {
            last_read[unit.layer][e] = Some(u);
        }
    }
    let mut dies_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); units.len()];
    for (t, reads) in last_read.iter().enumerate() {
        for (e, r) in reads.iter().enumerate() {
            if let Some(u) = r {
                dies_at[*u].push((t, e));
            }
        }
    }

    let mut placement: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![usize::MAX; n]).collect();
    let mut holder: Vec<Option<(usize, usize)>> = Vec::new();
    let mut free = BTreeSet::new();
    for e in 0..sizes[0] {
        placement[0][e] = e;
        holder.push(Some((0, e)));
    }
    let mut overlays = Vec::new();
    for (u, unit) in units.iter().enumerate() {
        for &(t, e) in &dies_at[u] {
            free.insert(placement[t][e]);
        }
        if !unit.is_last_channel {
            continue;
        }
        let t = unit.layer + 1;
        let slot = match free.pop_first() {
            Some(s) => s,
            None => {
                holder.push(None);
                holder.len() - 1
            }
        };
        if let Some(prev) = holder[slot] {
            overlays.push(Overlay { unit: u, tensor: t, index: unit.output, slot, replaces: Some(prev) });
        }
        holder[slot] = Some((t, unit.output));
        placement[t][unit.output] = slot;
    }

    let (conv_bits, fc_bits) = header_formula(shape, bits);
    let slots = holder.len();
    HeaderLayout {
        bits,
        conv_bits,
        fc_bits,
        header_bits: conv_bits.max(fc_bits),
        slots,
        slot_bits: slots as u64 * u64::from(bits),
        total_bits: 0,
        placement,
        overlays,
    }
}

/// Result of replaying a program's storage and input-select tables against
/// shadow memory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub reads: usize,
    pub writes: usize,
    /// Reads that found a different tensor element than the unit needs.
    pub stale_reads: usize,
    pub first_stale: Option<String>,
}

/// Walk the unit schedule with a shadow copy of the header, using only the
/// program's tables to decide where data is read from and written to.
pub fn replay_header(prog: &PipelineProgram) -> ReplayReport {
    let mut rep = ReplayReport::default();
    let (Some(select), Some(storage)) = (prog.mat("input_select"), prog.mat("storage")) else {
        rep.stale_reads = 1;
        rep.first_stale = Some("program lacks input_select or storage table".into());
        return rep;
    };
    let mut shadow: Vec<Option<(usize, usize)>> = vec![None; prog.header.slots];
    for (e, &s) in prog.header.placement[0].iter().enumerate() {
        if let Some(cell) = shadow.get_mut(s) {
            *cell = Some((0, e));
        }
    }
    let stale = |rep: &mut ReplayReport, msg: String| {
        rep.stale_reads += 1;
        rep.first_stale.get_or_insert(msg);
    };
    for unit in modularize_shape(&prog.shape) {
        let key = [unit.layer as i64, unit.input_index as i64, unit.acc as i64];
        let Some(slots) = select.get(&key) else {
            stale(&mut rep, format!("no input_select entry for {key:?}"));
            continue;
        };
        for (j, &e) in unit.inputs.iter().enumerate() {
            rep.reads += 1;
            let want = Some((unit.layer, e));
            let got = usize::try_from(slots[j]).ok().and_then(|s| shadow.get(s).copied()).flatten();
            if got != want {
                stale(&mut rep, format!("unit {key:?} read slot {} holding {got:?}, needs {want:?}", slots[j]));
            }
        }
        if unit.is_last_channel {
            let key = [unit.layer as i64, unit.input_index as i64, unit.channel as i64];
            match storage.get(&key) {
                Some(v) if v.len() == 2 && usize::try_from(v[0]).is_ok_and(|s| s < shadow.len()) => {
                    shadow[v[0] as usize] = Some((unit.layer + 1, v[1] as usize));
                    rep.writes += 1;
                    if v[1] as usize != unit.output {
                        stale(&mut rep, format!("storage {key:?} labels output {} instead of {}", v[1], unit.output));
                    }
                }
                _ => stale(&mut rep, format!("bad storage entry for {key:?}")),
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        let s = ModelShape::new(1, 4, &[2], &[2]).unwrap();
        assert_eq!(header_formula(&s, 7), (56, 42));
        assert_eq!(header_formula(&s, 14), (112, 84));
        let r = ModelShape::reference(16);
        // k = 1: 16·8 + C_in^(2) = 16 → 144 per bit; FC: 32 + 16 = 48.
        assert_eq!(header_formula(&r, 1), (144, 48));
        let fc_only = ModelShape::new(1, 6, &[], &[3, 2]).unwrap();
        assert_eq!(header_formula(&fc_only, 2), (0, 18));
        let conv_only = ModelShape::new(2, 5, &[3], &[]).unwrap();
        assert_eq!(header_formula(&conv_only, 1), (9, 0));
    }

    #[test]
    fn ties_pick_first_layer() {
        // Layer 1: 2·4 = 8, layer 2: 4·2 = 8; first wins, C_in^(2) = 2.
        let s = ModelShape::new(1, 8, &[2, 4], &[1]).unwrap();
        assert_eq!(header_formula(&s, 1).0, 10);
    }

    fn check_liveness(shape: &ModelShape) {
        let units = modularize_shape(shape);
        let h = allocate_with_units(shape, 4, &units);
        let mut shadow: Vec<Option<(usize, usize)>> = vec![None; h.slots];
        for (e, &s) in h.placement[0].iter().enumerate() {
            shadow[s] = Some((0, e));
        }
        for u in &units {
            for &e in &u.inputs {
                assert_eq!(shadow[h.placement[u.layer][e]], Some((u.layer, e)));
            }
            if u.is_last_channel {
                shadow[h.placement[u.layer + 1][u.output]] = Some((u.layer + 1, u.output));
            }
        }
        let last = shape.num_layers();
        for (e, &s) in h.placement[last].iter().enumerate() {
            assert_eq!(shadow[s], Some((last, e)));
        }
    }

    #[test]
    fn allocation_never_clobbers_live_data() {
        for (t, conv, fc) in [
            (4, vec![2], vec![2]),
            (7, vec![3, 2], vec![3, 4]),
            (16, vec![16, 16, 16], vec![16, 15]),
            (5, vec![], vec![3]),
            (9, vec![1, 1], vec![]),
        ] {
            check_liveness(&ModelShape::new(1, t, &conv, &fc).unwrap());
        }
    }

    #[test]
    fn slots_are_reused() {
        let s = ModelShape::reference(16);
        let h = allocate_header(&s, 7);
        let total: usize = s.boundary_sizes().iter().sum();
        assert!(h.slots < total);
        assert!(!h.overlays.is_empty());
    }
}
