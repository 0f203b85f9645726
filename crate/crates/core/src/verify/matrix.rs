//! Exhaustive permission and bounds matrix for [`translate`].

use crate::mmu::{translate, AccessKind, FaultKind};
use crate::model::{Descriptor, Layer, LayerPerms, Suid};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatrixReport {
    /// (layer, access, permset) combinations.
    pub cases: usize,
    /// Individual translate calls compared against the oracle.
    pub checks: usize,
    pub mismatches: Vec<String>,
}

impl MatrixReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// The eight read/write/execute combinations as `rwx`-style strings.
fn permset_strings() -> Vec<String> {
    (0u8..8)
        .map(|bits| {
            let flag = |mask: u8, c: char| if bits & mask != 0 { c } else { '-' };
            [flag(4, 'r'), flag(2, 'w'), flag(1, 'x')].iter().collect()
        })
        .collect()
}

/// Complement of an `rwx` string, so the other layers never agree by accident.
fn complement(p: &str) -> String {
    p.chars()
        .zip("rwx".chars())
        .map(|(c, full)| if c == '-' { full } else { '-' })
        .collect()
}

/// The oracle: offsets are compared as u128 and permission is membership
/// of the access letter in the layer's string.
fn expected(len: u64, offset: u64, perm: &str, access: char) -> Option<FaultKind> {
    if u128::from(offset) >= u128::from(len) {
        Some(FaultKind::Bounds)
    } else if perm.contains(access) {
        None
    } else {
        Some(FaultKind::Permission)
    }
}

pub fn permission_matrix_check() -> MatrixReport {
    let mut report = MatrixReport::default();
    let layers = [
        ('S', Layer::Services),
        ('U', Layer::Utilities),
        ('K', Layer::Kernel),
    ];
    let accesses = [
        ('r', AccessKind::Read),
        ('w', AccessKind::Write),
        ('x', AccessKind::ExecuteFetch),
    ];
    for (lc, layer) in layers {
        for (ac, access) in accesses {
            for perm in permset_strings() {
                report.cases += 1;
                let other = complement(&perm);
                let text: Vec<String> = layers
                    .iter()
                    .map(|(c, _)| format!("{c}:{}", if *c == lc { &perm } else { &other }))
                    .collect();
                let perms: LayerPerms = text.join(" ").parse().expect("well-formed");
                for len in [1u64, 16] {
                    let d = Descriptor {
                        suid: Suid(0x1000 + len),
                        length: len,
                        perms,
                        gate_to: None,
                        handler: false,
                    };
                    for offset in [0, len - 1, len, len + 1, u64::MAX] {
                        report.checks += 1;
                        let want = expected(len, offset, &perm, ac);
                        let got = translate(&d, offset, access, layer);
                        let agrees = match (&got, want) {
                            (Ok(()), None) => true,
                            (Err(f), Some(kind)) => {
                                f.kind == kind
                                    && f.suid == d.suid
                                    && f.offset == offset
                                    && f.access == access
                                    && f.layer == layer
                            }
                            _ => false,
                        };
                        if !agrees {
                            report.mismatches.push(format!(
                                "layer {lc} access {ac} perms {perm} len {len} offset {offset:#x}: \
                                 expected {want:?}, got {got:?}"
                            ));
                        }
                    }
                }
            }
        }
    }
    report
}
