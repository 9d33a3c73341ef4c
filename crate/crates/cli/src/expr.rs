//! Scalar fields given either as FLD files or as closed-form expressions.
//!
//! Expressions use `x1 … xn` for the coordinates (`x`, `y`, `z` alias the
//! first three) and evalexpr's `math::` functions, e.g. `1 + math::sin(4.0 * x1) / 8.0`.
//! Integer literals divide as integers, so write `1.0/2.0` rather than `1/2`.

use std::path::Path;

use anyhow::{anyhow, bail, Context as _, Result};
use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Value,
};
use s2lab_core::field::io::load_scalar;
use s2lab_core::field::{Grid, ScalarField};

/// Samples `expr` at every node of `grid`.
pub fn sample_expression(expr: &str, grid: &Grid) -> Result<ScalarField> {
    let tree = build_operator_tree::<DefaultNumericTypes>(expr)
        .map_err(|e| anyhow!("cannot parse expression `{expr}`: {e}"))?;
    let n = grid.dim();
    let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
    let mut x = vec![0.0; n];
    let mut values = Vec::with_capacity(grid.len());
    for node in 0..grid.len() {
        grid.coords(node, &mut x);
        for (i, &c) in x.iter().enumerate() {
            ctx.set_value(format!("x{}", i + 1), Value::Float(c))
                .map_err(|e| anyhow!("{e}"))?;
            if let Some(alias) = ["x", "y", "z"].get(i) {
                ctx.set_value((*alias).to_string(), Value::Float(c))
                    .map_err(|e| anyhow!("{e}"))?;
            }
        }
        let v = match tree.eval_with_context(&ctx) {
            Ok(Value::Float(v)) => v,
            Ok(Value::Int(v)) => v as f64,
            Ok(other) => bail!("expression `{expr}` gave a non-numeric value {other:?}"),
            Err(e) => bail!("cannot evaluate `{expr}` at {x:?}: {e}"),
        };
        values.push(v);
    }
    Ok(ScalarField::new(grid.clone(), values)?)
}

/// An FLD path if one exists at `spec`, else an expression on `grid`.
pub fn field_or_expression(spec: &str, grid: Option<&Grid>) -> Result<ScalarField> {
    if Path::new(spec).is_file() {
        let f = load_scalar(spec).with_context(|| format!("reading {spec}"))?;
        if let Some(g) = grid {
            g.ensure_same(f.grid())
                .with_context(|| format!("{spec} lives on a different grid"))?;
        }
        return Ok(f);
    }
    let grid = grid.ok_or_else(|| anyhow!("`{spec}` is not a file and no grid is known to sample it on"))?;
    sample_expression(spec, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expression_sampling() {
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let f = sample_expression("1 + math::sin(2.0 * x1) / 4.0 + y * z", &g).unwrap();
        let mut x = vec![0.0; 3];
        for node in 0..g.len() {
            g.coords(node, &mut x);
            let want = 1.0 + (2.0 * x[0]).sin() / 4.0 + x[1] * x[2];
            assert!((f.at(node) - want).abs() < 1e-15);
        }
        let c = sample_expression("3", &g).unwrap();
        assert!(c.values().iter().all(|&v| v == 3.0));
        assert!(sample_expression("x1 +", &g).is_err());
        assert!(field_or_expression("x1", None).is_err());
    }
}
