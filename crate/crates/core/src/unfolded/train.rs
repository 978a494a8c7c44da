use super::head::is_head_param;
use super::model::UnfoldedModel;
use crate::autodiff::Gradients;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::train::{accumulate, fit, EvalSet, ParamGroup, TrainConfig, TrainHistory};

/// Minimises the mean `‖x* − x̂_T‖²` over the training split. The model is
/// left at its best-on-validation parameters.
pub fn train_unfolded(model: &mut UnfoldedModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    model.check_dims(ds.dims)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let mut mg = model.build(None)?;
    let names = mg.graph.param_names();
    let (head, solver): (Vec<String>, Vec<String>) = names.into_iter().partition(|n| is_head_param(n));
    let groups = vec![
        ParamGroup {
            names: solver,
            lr: cfg.lr_solver,
        },
        ParamGroup {
            names: head,
            lr: cfg.lr_head,
        },
    ];
    // Both closures need the graph; a RefCell keeps the borrow checker happy.
    let mg = std::cell::RefCell::new(&mut mg);
    let mut params = std::mem::take(&mut model.params);
    let result = fit(
        &mut params,
        groups,
        train.len(),
        cfg,
        |p, idx, _| {
            let mut mg = mg.borrow_mut();
            mg.bind_params(p);
            let mut total = 0.0;
            let mut grads = Gradients::new();
            for &i in idx {
                mg.run(&train[i])?;
                total += mg.graph.value(mg.loss)?.item();
                accumulate(&mut grads, mg.graph.backward(mg.loss)?)?;
            }
            Ok((total, grads))
        },
        |p, which| {
            let mut mg = mg.borrow_mut();
            mg.bind_params(p);
            let set = match which {
                EvalSet::Train => train,
                EvalSet::Val => val,
            };
            let mut total = 0.0;
            for inst in set {
                mg.run(inst)?;
                total += mg.graph.value(mg.loss)?.item();
            }
            Ok(total / set.len() as f64)
        },
    );
    model.params = params;
    result
}
