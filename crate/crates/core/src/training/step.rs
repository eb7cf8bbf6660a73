use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Array4, Axis};

use super::{BceSource, Batch, LossRecipe, Result, Temperatures, TrainError};
use crate::losses::{
    bce_multilabel, compose_loss, infonce_inter, mulsupcon, normalize_rows_backward, ntxent_intra, LabelMatrix,
    LossValue, ProjectionMatrix, TermId, NO_POSITIVES_FLAG,
};
use crate::model::{fuse, split_fused, DualEncoderModel, EncodeCache, Modality, ProjectionCache, Real};

/// Composite loss of one batch and its gradient w.r.t. every parameter.
pub struct StepOutput<T: Real> {
    pub loss: LossValue,
    pub grads: crate::model::ParamSet<T>,
    /// Terms whose batch had no positive pairs.
    pub warnings: Vec<String>,
}

/// One encoder pass over a stack of patches, with accumulated upstream
/// gradients for its features and (optionally) its projections.
struct Pass<T: Real> {
    h: Array2<T>,
    enc: EncodeCache,
    proj: Option<ProjectionCache<T>>,
    dh: Array2<f64>,
    dz: Option<Array2<f64>>,
}

impl<T: Real> Pass<T> {
    fn run(model: &DualEncoderModel<T>, m: Modality, x: &Array4<f32>, project: bool) -> Result<Self> {
        let (h, enc) = model.encode_train(m, &x.mapv(|v| T::from_f64(f64::from(v))))?;
        let proj = if project { Some(model.project_train(m, &h)?) } else { None };
        let dz = proj.as_ref().map(|p| Array2::zeros(p.z().raw_dim()));
        let dh = Array2::zeros(h.raw_dim());
        Ok(Self { h, enc, proj, dh, dz })
    }

    fn z(&self) -> Result<ProjectionMatrix> {
        let z = self.proj.as_ref().expect("projection requested").z();
        Ok(ProjectionMatrix::new(to_f64(z))?)
    }

    fn add_dz(&mut self, g: &Array2<f64>, weight: f64) {
        let dz = self.dz.as_mut().expect("projection requested");
        dz.scaled_add(weight, g);
    }
}

fn to_f64<T: Real>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

fn from_f64<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::from_f64)
}

fn stack_views(pair: &super::ViewPair) -> Array4<f32> {
    concatenate(Axis(0), &[pair.first.view(), pair.second.view()]).expect("views share a shape")
}

/// Computes exactly the recipe's terms on `batch` and back-propagates their
/// weighted sum through the model in a single pass.
pub fn build_step<T: Real>(
    recipe: &LossRecipe,
    temperatures: &Temperatures,
    batch: &Batch,
    model: &DualEncoderModel<T>,
) -> Result<StepOutput<T>> {
    let labels: Option<&LabelMatrix> = if recipe.needs_labels() {
        Some(batch.labels().ok_or(TrainError::MissingLabels)?)
    } else {
        None
    };
    let slot = |m: Modality| m as usize;
    let mut clean: [Option<Pass<T>>; 2] = [None, None];
    let mut views: [Option<Pass<T>>; 2] = [None, None];
    let project_clean = recipe.has(TermId::Inter) || recipe.has(TermId::MscFused);
    for m in Modality::BOTH {
        if recipe.needs_clean() {
            let x = batch
                .clean(m)
                .ok_or_else(|| TrainError::Config(format!("batch lacks clean {m} patches")))?;
            clean[slot(m)] = Some(Pass::run(model, m, x, project_clean)?);
        }
        if recipe.needs_views(m) {
            let pair = batch
                .views(m)
                .ok_or_else(|| TrainError::Config(format!("batch lacks augmented {m} views")))?;
            let (intra, msc) = match m {
                Modality::S1 => (TermId::IntraS1, TermId::MscS1Views),
                Modality::S2 => (TermId::IntraS2, TermId::MscS2Views),
            };
            let project = recipe.has(intra) || recipe.has(msc);
            views[slot(m)] = Some(Pass::run(model, m, &stack_views(pair), project)?);
        }
    }

    let mut grads = model.zero_grads();
    let mut computed: BTreeMap<TermId, LossValue> = BTreeMap::new();
    let mut warnings = Vec::new();
    for wt in recipe.terms() {
        let t = temperatures.for_term(wt.term);
        let w = wt.weight;
        let value = match wt.term {
            TermId::IntraS1 | TermId::IntraS2 => {
                let m = if wt.term == TermId::IntraS1 { Modality::S1 } else { Modality::S2 };
                let pass = views[slot(m)].as_mut().expect("views encoded");
                let ev = ntxent_intra(&pass.z()?, t)?;
                pass.add_dz(&ev.grad, w);
                ev.value
            }
            TermId::Inter => {
                let z1 = clean[0].as_ref().expect("clean encoded").z()?;
                let z2 = clean[1].as_ref().expect("clean encoded").z()?;
                let ev = infonce_inter(&z1, &z2, t)?;
                clean[0].as_mut().expect("clean encoded").add_dz(&ev.grad.s1, w);
                clean[1].as_mut().expect("clean encoded").add_dz(&ev.grad.s2, w);
                ev.value
            }
            TermId::MscFused => {
                let z1 = clean[0].as_ref().expect("clean encoded").z()?;
                let z2 = clean[1].as_ref().expect("clean encoded").z()?;
                let raw = concatenate(Axis(1), &[z1.view(), z2.view()]).expect("row counts match");
                let fused = ProjectionMatrix::normalize(raw.view())?;
                let ev = mulsupcon(&fused, labels.expect("labels checked"), t)?;
                let draw = normalize_rows_backward(raw.view(), fused.view(), ev.grad.view());
                let (d1, d2) = split_fused(&draw, z1.ncols());
                clean[0].as_mut().expect("clean encoded").add_dz(&d1, w);
                clean[1].as_mut().expect("clean encoded").add_dz(&d2, w);
                ev.value
            }
            TermId::MscS1Views | TermId::MscS2Views => {
                let m = if wt.term == TermId::MscS1Views { Modality::S1 } else { Modality::S2 };
                let pass = views[slot(m)].as_mut().expect("views encoded");
                let y = labels.expect("labels checked").duplicated();
                let ev = mulsupcon(&pass.z()?, &y, t)?;
                pass.add_dz(&ev.grad, w);
                ev.value
            }
            TermId::Bce => {
                let y = labels.expect("labels checked");
                let (passes, y) = match recipe.bce_source() {
                    BceSource::Clean => (&mut clean, y.clone()),
                    BceSource::Views => (&mut views, y.duplicated()),
                };
                let [p1, p2] = passes;
                let (p1, p2) = (p1.as_mut().expect("encoded"), p2.as_mut().expect("encoded"));
                let fused = fuse(&p1.h, &p2.h)?;
                let logits = model.logits(&fused)?;
                let ev = bce_multilabel(to_f64(&logits).view(), &y)?;
                let dlogits = from_f64::<T>(&(ev.grad * w));
                let dfused = model.classifier_backward(&fused, dlogits.view(), &mut grads);
                let (d1, d2) = split_fused(&to_f64(&dfused), p1.h.ncols());
                p1.dh += &d1;
                p2.dh += &d2;
                ev.value
            }
        };
        if value.terms.contains_key(NO_POSITIVES_FLAG) {
            warnings.push(format!("{}: no anchor has a positive in this batch", wt.term));
        }
        computed.insert(wt.term, value);
    }

    for m in Modality::BOTH {
        for pass in [clean[slot(m)].as_mut(), views[slot(m)].as_mut()].into_iter().flatten() {
            if let (Some(dz), Some(proj)) = (&pass.dz, &pass.proj) {
                let dh = model.project_backward(m, proj, from_f64::<T>(dz).view(), &mut grads);
                pass.dh += &to_f64(&dh);
            }
            model.encode_backward(&pass.enc, from_f64::<T>(&pass.dh).view(), &mut grads);
        }
    }
    let loss = compose_loss(recipe.terms(), &computed)?;
    if !loss.total.is_finite() {
        return Err(TrainError::NonFinite(format!("composite loss {}", loss.total)));
    }
    Ok(StepOutput { loss, grads, warnings })
}
