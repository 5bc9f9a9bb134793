//! Capability-vector arithmetic: deltas between checkpoints, extraction of
//! `γ = θ_ao − θ_ft`, merging `θ_meta = θ_pt + α·γ`, and inner-product
//! diagnostics between a capability vector and a later displacement.

use serde::Serialize;

use crate::checkpoint::{align_keys, matches_prefix, ParamSet};
use crate::error::{AlignmentConflict, Error, Result};

/// Merge weight that performed best in the original merging-weight sweep.
pub const DEFAULT_ALPHA: f32 = 1.1;

/// Meta keys compared when checking that two finetuned checkpoints share a
/// training setup.
pub const PROVENANCE_KEYS: &[&str] = &["parent", "family", "steps", "batch", "learning_rate"];

/// How strictly two key sets must agree before elementwise arithmetic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AlignPolicy {
    /// Identical keys and shapes on both sides.
    #[default]
    Strict,
    /// Operate on shared keys; shape conflicts are still fatal.
    SharedOnly,
}

/// Elementwise `after − before` per shared key.
pub fn delta(after: &ParamSet, before: &ParamSet) -> Result<ParamSet> {
    delta_with(after, before, AlignPolicy::Strict)
}

pub fn delta_with(after: &ParamSet, before: &ParamSet, policy: AlignPolicy) -> Result<ParamSet> {
    let al = align_keys(after, before);
    match policy {
        AlignPolicy::Strict => al.require_exact()?,
        AlignPolicy::SharedOnly => {
            if !al.shape_conflicts.is_empty() {
                return Err(Error::Alignment(al.conflicts()));
            }
        }
    }
    let mut out = ParamSet::new();
    for name in &al.shared {
        let d = after.get(name).unwrap().sub(before.get(name).unwrap())?;
        out.insert(name.clone(), d)?;
    }
    out.set_meta("kind", "delta");
    out.set_meta("after", after.digest());
    out.set_meta("before", before.digest());
    Ok(out)
}

/// `γ = θ_ao − θ_ft` with the digests of both sources.
#[derive(Debug, Clone, PartialEq)]
pub struct CapabilityVector {
    pub params: ParamSet,
    pub source_ao_hash: String,
    pub source_ft_hash: String,
    pub extraction_note: String,
    /// Non-fatal provenance mismatches found at extraction time.
    pub warnings: Vec<String>,
}

impl CapabilityVector {
    /// Wraps an existing parameter set, e.g. one loaded from disk.
    pub fn from_params(params: ParamSet) -> Self {
        let source_ao_hash = params.meta_value("source_ao").unwrap_or_default().to_string();
        let source_ft_hash = params.meta_value("source_ft").unwrap_or_default().to_string();
        let extraction_note = params.meta_value("note").unwrap_or_default().to_string();
        Self {
            params,
            source_ao_hash,
            source_ft_hash,
            extraction_note,
            warnings: Vec::new(),
        }
    }

    /// Scales every tensor; used by the diagnostics bilinearity checks.
    pub fn scaled(&self, c: f32) -> Result<Self> {
        let mut params = ParamSet::new().with_meta(self.params.meta().clone());
        for (k, t) in self.params.iter() {
            params.insert(k.clone(), t.scale(c)?)?;
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }
}

/// Compares training-setup meta of the two checkpoints.
pub fn provenance_warnings(theta_ao: &ParamSet, theta_ft: &ParamSet) -> Vec<String> {
    let mut out = Vec::new();
    for key in PROVENANCE_KEYS {
        match (theta_ao.meta_value(key), theta_ft.meta_value(key)) {
            (Some(a), Some(b)) if a != b => {
                out.push(format!("meta '{key}' differs: {a} vs {b}"));
            }
            (None, _) | (_, None) => {
                out.push(format!("meta '{key}' missing; cannot verify shared setup"));
            }
            _ => {}
        }
    }
    out
}

pub fn extract_capability(theta_ao: &ParamSet, theta_ft: &ParamSet) -> Result<CapabilityVector> {
    let mut params = delta(theta_ao, theta_ft)?;
    let source_ao_hash = theta_ao.digest();
    let source_ft_hash = theta_ft.digest();
    let extraction_note = "theta_ao - theta_ft, strict alignment".to_string();
    params.set_meta("kind", "capability_vector");
    params.set_meta("source_ao", source_ao_hash.clone());
    params.set_meta("source_ft", source_ft_hash.clone());
    params.set_meta("note", extraction_note.clone());
    Ok(CapabilityVector {
        params,
        source_ao_hash,
        source_ft_hash,
        extraction_note,
        warnings: provenance_warnings(theta_ao, theta_ft),
    })
}

/// `θ_pt + α·γ` on keys selected by `mask` (all γ keys when `None`).
///
/// Keys outside the mask, and keys of `θ_pt` that γ does not cover, are
/// copied bit for bit.
pub fn merge(
    theta_pt: &ParamSet,
    gamma: &CapabilityVector,
    alpha: f32,
    mask: Option<&[String]>,
) -> Result<ParamSet> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite(format!("alpha {alpha}")));
    }
    let al = align_keys(&gamma.params, theta_pt);
    let mut conflicts: Vec<AlignmentConflict> = al
        .missing_right
        .iter()
        .cloned()
        .map(AlignmentConflict::MissingRight)
        .collect();
    conflicts.extend(al.conflicts().into_iter().filter(|c| {
        matches!(c, AlignmentConflict::Shape { .. })
    }));
    if !conflicts.is_empty() {
        return Err(Error::Alignment(conflicts));
    }

    let mut out = ParamSet::new().with_meta(theta_pt.meta().clone());
    for (name, base) in theta_pt.iter() {
        let selected = mask.is_none_or(|m| matches_prefix(name, m));
        let t = match gamma.params.get(name) {
            Some(g) if selected => base.add(&g.scale(alpha)?)?,
            _ => base.clone(),
        };
        out.insert(name.clone(), t)?;
    }
    out.set_meta("kind", "meta_model");
    out.set_meta("alpha", format!("{alpha}"));
    out.set_meta("mask", mask.map(|m| m.join(",")).unwrap_or_default());
    out.set_meta("merge_base", theta_pt.digest());
    out.set_meta("merge_gamma", gamma.params.digest());
    out.set_meta("source_ao", gamma.source_ao_hash.clone());
    out.set_meta("source_ft", gamma.source_ft_hash.clone());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiag {
    pub name: String,
    pub gamma_norm: f64,
    pub delta_norm: f64,
    pub cosine: f64,
    pub inner_product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalDiag {
    pub gamma_norm: f64,
    pub delta_norm: f64,
    pub cosine: f64,
    pub inner_product: f64,
}

/// Norms, cosines and inner products between γ and a displacement Δ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagReport {
    pub per_param: Vec<ParamDiag>,
    pub global: GlobalDiag,
}

fn cosine(inner: f64, na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (inner / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn diagnostics(gamma: &CapabilityVector, delta: &ParamSet) -> Result<DiagReport> {
    let al = align_keys(&gamma.params, delta);
    if !al.shape_conflicts.is_empty() || al.shared.is_empty() {
        let mut c = al.conflicts();
        if c.is_empty() {
            c.push(AlignmentConflict::MissingRight("<no shared keys>".into()));
        }
        return Err(Error::Alignment(c));
    }
    let mut per_param = Vec::with_capacity(al.shared.len());
    let (mut gg, mut dd, mut gd) = (0.0f64, 0.0f64, 0.0f64);
    for name in &al.shared {
        let g = gamma.params.get(name).unwrap();
        let d = delta.get(name).unwrap();
        let inner = g.dot(d)?;
        let gn = g.frobenius_norm();
        let dn = d.frobenius_norm();
        gg += gn * gn;
        dd += dn * dn;
        gd += inner;
        per_param.push(ParamDiag {
            name: name.clone(),
            gamma_norm: gn,
            delta_norm: dn,
            cosine: cosine(inner, gn, dn),
            inner_product: inner,
        });
    }
    let (gn, dn) = (gg.sqrt(), dd.sqrt());
    Ok(DiagReport {
        per_param,
        global: GlobalDiag {
            gamma_norm: gn,
            delta_norm: dn,
            cosine: cosine(gd, gn, dn),
            inner_product: gd,
        },
    })
}

/// Flattened cosine between two deltas over their shared keys.
pub fn flat_cosine(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let d = diagnostics(&CapabilityVector::from_params(a.clone()), b)?;
    Ok(d.global.cosine)
}

impl DiagReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per parameter name.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,gamma_norm,delta_norm,cosine,inner_product\n");
        for p in &self.per_param {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.name, p.gamma_norm, p.delta_norm, p.cosine, p.inner_product
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn ps(entries: &[(&str, &[f32])]) -> ParamSet {
        ParamSet::from_entries(
            entries
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::vector(v.to_vec()).unwrap())),
        )
        .unwrap()
    }

    #[test]
    fn delta_examples() {
        let d = delta(&ps(&[("w", &[1.0, 2.0])]), &ps(&[("w", &[0.5, 1.5])])).unwrap();
        assert_eq!(d.get("w").unwrap().data(), &[0.5, 0.5]);
        let a = ps(&[("w", &[3.0, -1.0])]);
        assert!(delta(&a, &a).unwrap().get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_reports_shape_conflict() {
        let err = delta(&ps(&[("w", &[1.0, 2.0])]), &ps(&[("w", &[1.0, 2.0, 3.0])])).unwrap_err();
        match err {
            Error::Alignment(c) => assert_eq!(
                c,
                vec![AlignmentConflict::Shape {
                    name: "w".into(),
                    left: vec![2],
                    right: vec![3]
                }]
            ),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn shared_only_policy_skips_missing_keys() {
        let a = ps(&[("w", &[1.0]), ("extra", &[2.0])]);
        let b = ps(&[("w", &[0.5])]);
        assert!(delta(&a, &b).is_err());
        let d = delta_with(&a, &b, AlignPolicy::SharedOnly).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn extraction_and_zero_merge() {
        let g = extract_capability(&ps(&[("w", &[1.0, 2.0])]), &ps(&[("w", &[0.5, 1.5])])).unwrap();
        assert_eq!(g.params.get("w").unwrap().data(), &[0.5, 0.5]);

        let same = ps(&[("w", &[1.0, 2.0])]);
        let zero = extract_capability(&same, &same).unwrap();
        let pt = ps(&[("w", &[4.0, -4.0])]);
        let merged = merge(&pt, &zero, DEFAULT_ALPHA, None).unwrap();
        assert!(merged.bits_eq(&pt));
    }

    #[test]
    fn missing_provenance_warns() {
        let a = ps(&[("w", &[1.0])]);
        let g = extract_capability(&a, &a).unwrap();
        assert!(!g.warnings.is_empty());
        let mut b = a.clone();
        let mut c = a.clone();
        for k in PROVENANCE_KEYS {
            b.set_meta(*k, "x");
            c.set_meta(*k, "x");
        }
        assert!(provenance_warnings(&b, &c).is_empty());
        c.set_meta("steps", "y");
        assert_eq!(provenance_warnings(&b, &c).len(), 1);
    }

    #[test]
    fn merge_examples() {
        let pt = ps(&[("w", &[1.0, 1.0])]);
        let g = CapabilityVector::from_params(ps(&[("w", &[2.0, -2.0])]));
        let m = merge(&pt, &g, 0.5, None).unwrap();
        assert_eq!(m.get("w").unwrap().data(), &[2.0, 0.0]);
        assert!(merge(&pt, &g, 0.0, None).unwrap().bits_eq(&pt));
        assert_eq!(m.meta_value("alpha"), Some("0.5"));
    }

    #[test]
    fn masked_merge_keeps_other_prefixes() {
        let pt = ps(&[("vlm.a", &[1.0, 2.0]), ("expert.b", &[3.0])]);
        let g = CapabilityVector::from_params(ps(&[("vlm.a", &[1.0, 1.0]), ("expert.b", &[5.0])]));
        let m = merge(&pt, &g, DEFAULT_ALPHA, Some(&["vlm.".to_string()])).unwrap();
        assert!(m.get("expert.b").unwrap().bits_eq(pt.get("expert.b").unwrap()));
        assert_eq!(m.get("vlm.a").unwrap().data(), &[1.0 + 1.1, 2.0 + 1.1]);
    }

    #[test]
    fn merge_rejects_gamma_keys_outside_base() {
        let pt = ps(&[("w", &[1.0])]);
        let g = CapabilityVector::from_params(ps(&[("w", &[1.0]), ("x", &[1.0])]));
        assert!(matches!(merge(&pt, &g, 1.0, None), Err(Error::Alignment(_))));
        assert!(merge(&pt, &g, f32::NAN, None).is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let g = CapabilityVector::from_params(ps(&[("w", &[1.0, 0.0])]));
        let r = diagnostics(&g, &ps(&[("w", &[0.0, 1.0])])).unwrap();
        assert_eq!(r.per_param[0].inner_product, 0.0);
        assert_eq!(r.per_param[0].cosine, 0.0);

        let d = ps(&[("w", &[0.3, -1.7])]);
        let g = CapabilityVector::from_params(d.clone());
        let r = diagnostics(&g, &d).unwrap();
        assert!((r.global.cosine - 1.0).abs() < 1e-6);
        assert!(r.to_csv().starts_with("name,gamma_norm"));
        assert!(r.to_json().unwrap().contains("per_param"));
    }
}
