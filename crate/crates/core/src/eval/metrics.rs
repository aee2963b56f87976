use crate::error::{bail, Result};

/// `2 |P and G| / (|P| + |G|)` over nonzero entries. Two empty masks score
/// 1.0: an absent organ that is not predicted is a correct case.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        bail!(Shape, "dice on masks of {} and {} voxels", pred.len(), gt.len());
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Binary Dice of class `k` for `k = 1..=num_classes` on label maps.
pub fn dice_per_class(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        bail!(Shape, "dice on masks of {} and {} voxels", pred.len(), gt.len());
    }
    let mut inter = vec![0usize; num_classes + 1];
    let mut p = vec![0usize; num_classes + 1];
    let mut g = vec![0usize; num_classes + 1];
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a as usize, b as usize);
        if a > num_classes || b > num_classes {
            bail!(Validation, "class id {} outside 0..={num_classes}", a.max(b));
        }
        p[a] += 1;
        g[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    Ok((1..=num_classes)
        .map(|k| if p[k] + g[k] == 0 { 1.0 } else { 2.0 * inter[k] as f64 / (p[k] + g[k]) as f64 })
        .collect())
}
