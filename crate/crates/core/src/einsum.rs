//! Einsum expression generation for tensor circuits, plus a small pairwise
//! contraction engine that evaluates such expressions.

use std::collections::{BTreeMap, HashSet};

use crate::error::{ensure, Error, Result};
use crate::tensor::{strides_of, AxisShape, DenseTensor};

/// Subscript symbol for index `i`: `a..z`, `A..Z`, then code points offset
/// by 140 (skipping the surrogate block), the same sequence the
/// `opt_einsum` package produces.
pub fn symbol(i: usize) -> char {
    const BASE: &[u8; 52] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    if i < 52 {
        BASE[i] as char
    } else if i >= 55296 {
        char::from_u32(i as u32 + 2048).expect("symbol index past the unicode range")
    } else {
        char::from_u32(i as u32 + 140).expect("symbol index maps to a valid code point")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EinsumExpr {
    text: String,
    operand_count: usize,
}

impl EinsumExpr {
    pub fn parse(text: &str) -> Result<Self> {
        let parsed = Parsed::new(text)?;
        Ok(Self { text: text.to_owned(), operand_count: parsed.inputs.len() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn operand_count(&self) -> usize {
        self.operand_count
    }
}

impl std::fmt::Display for EinsumExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// Gate pairs `(m, n)` (zero-based, `m < n`) in the canonical all-pairs
/// order: `itertools.combinations` over negative axes `-1, -2, .., -N`.
/// For `N = 3` this is `(1, 2), (0, 2), (0, 1)`.
pub fn all_pairs_order(n_axes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n_axes * n_axes.saturating_sub(1) / 2);
    for i in 0..n_axes {
        for j in i + 1..n_axes {
            pairs.push((n_axes - 1 - j, n_axes - 1 - i));
        }
    }
    pairs
}

/// Builds the gate-operand terms and tracks current symbols per axis.
/// Every time an axis is touched its symbol index advances by `n_axes`,
/// so symbols never collide for any gate sequence.
fn circuit_terms(n_axes: usize, pairs: &[(usize, usize)]) -> (Vec<String>, Vec<usize>) {
    let mut current: Vec<usize> = (0..n_axes).collect();
    let mut terms = Vec::with_capacity(pairs.len());
    for &(m, n) in pairs {
        let (old_m, old_n) = (current[m], current[n]);
        let (new_m, new_n) = (old_m + n_axes, old_n + n_axes);
        terms.push([new_m, new_n, old_m, old_n].iter().map(|&i| symbol(i)).collect());
        current[m] = new_m;
        current[n] = new_n;
    }
    (terms, current)
}

fn check_pairs(n_axes: usize, pairs: &[(usize, usize)]) -> Result<()> {
    for &(m, n) in pairs {
        ensure!(
            m != n && m < n_axes && n < n_axes,
            InvalidArgument,
            "gate axes ({m}, {n}) invalid for {n_axes} axes"
        );
    }
    Ok(())
}

/// Expression applying gates (given in application order) to a batched
/// state. Gate operands are listed last-applied last, so the operand list
/// reads `x, T_first, .., T_last`.
pub fn gen_apply_expr_for(n_axes: usize, pairs: &[(usize, usize)]) -> Result<EinsumExpr> {
    check_pairs(n_axes, pairs)?;
    let (terms, current) = circuit_terms(n_axes, pairs);
    let mut text = String::from("...");
    text.extend((0..n_axes).map(symbol));
    for t in &terms {
        text.push(',');
        text.push_str(t);
    }
    text.push_str("->...");
    text.extend(current.iter().map(|&i| symbol(i)));
    Ok(EinsumExpr { text, operand_count: 1 + terms.len() })
}

/// Expression contracting the gates alone into the full operator with
/// output axes first, then input axes.
pub fn gen_operator_expr_for(n_axes: usize, pairs: &[(usize, usize)]) -> Result<EinsumExpr> {
    check_pairs(n_axes, pairs)?;
    ensure!(!pairs.is_empty(), InvalidArgument, "operator expression needs at least one gate");
    let (terms, current) = circuit_terms(n_axes, pairs);
    let mut text = terms.join(",");
    text.push_str("->");
    text.extend(current.iter().map(|&i| symbol(i)));
    text.extend((0..n_axes).map(symbol));
    Ok(EinsumExpr { text, operand_count: terms.len() })
}

/// All-pairs application expression for `n_axes` axes.
pub fn gen_apply_expr(n_axes: usize) -> Result<EinsumExpr> {
    ensure!(n_axes >= 2, InvalidArgument, "need at least 2 axes, got {n_axes}");
    gen_apply_expr_for(n_axes, &all_pairs_order(n_axes))
}

/// All-pairs full-operator expression for `n_axes` axes.
pub fn gen_operator_expr(n_axes: usize) -> Result<EinsumExpr> {
    ensure!(n_axes >= 2, InvalidArgument, "need at least 2 axes, got {n_axes}");
    gen_operator_expr_for(n_axes, &all_pairs_order(n_axes))
}

/// Pairwise contraction schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContractOrder {
    /// Fold operands strictly left to right. Bitwise reproducible.
    #[default]
    LeftToRight,
    /// Repeatedly contract the pair with the smallest intermediate;
    /// ties go to the lowest operand indices.
    Greedy,
}

#[derive(Debug)]
struct Term {
    ellipsis: bool,
    chars: Vec<char>,
}

#[derive(Debug)]
struct Parsed {
    inputs: Vec<Term>,
    output: Term,
}

impl Parsed {
    fn new(text: &str) -> Result<Self> {
        let (lhs, rhs) = text
            .split_once("->")
            .ok_or_else(|| Error::Contraction(format!("expression {text:?} lacks '->'")))?;
        let parse_term = |t: &str| -> Result<Term> {
            let (ellipsis, rest) = match t.strip_prefix("...") {
                Some(rest) => (true, rest),
                None => (false, t),
            };
            ensure!(
                !rest.contains('.'),
                Contraction,
                "ellipsis must lead its term in {t:?}"
            );
            let chars: Vec<char> = rest.chars().collect();
            let unique: HashSet<&char> = chars.iter().collect();
            ensure!(unique.len() == chars.len(), Contraction, "repeated subscript in term {t:?}");
            Ok(Term { ellipsis, chars })
        };
        let inputs = lhs.split(',').map(parse_term).collect::<Result<Vec<_>>>()?;
        let output = parse_term(rhs)?;
        let seen: HashSet<char> = inputs.iter().flat_map(|t| t.chars.iter().copied()).collect();
        for c in &output.chars {
            ensure!(seen.contains(c), Contraction, "output subscript {c:?} absent from inputs");
        }
        if output.ellipsis {
            ensure!(
                inputs.iter().any(|t| t.ellipsis),
                Contraction,
                "output ellipsis without an input ellipsis"
            );
        }
        Ok(Self { inputs, output })
    }
}

/// Working tensor during contraction: one label id per axis.
#[derive(Debug, Clone)]
struct Labeled {
    labels: Vec<usize>,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Labeled {
    fn size(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Contracts `a` and `b`, keeping only labels in `keep`. Labels of the
/// result follow `a`'s order, then new labels from `b`.
fn contract_pair(a: &Labeled, b: &Labeled, keep: &HashSet<usize>, extent: &BTreeMap<usize, usize>) -> Labeled {
    let mut union: Vec<usize> = a.labels.clone();
    union.extend(b.labels.iter().filter(|l| !a.labels.contains(l)));
    let out_labels: Vec<usize> = union.iter().copied().filter(|l| keep.contains(l)).collect();
    let out_dims: Vec<usize> = out_labels.iter().map(|l| extent[l]).collect();
    let union_dims: Vec<usize> = union.iter().map(|l| extent[l]).collect();

    let stride_in = |labels: &[usize], dims: &[usize]| -> Vec<usize> {
        let s = strides_of(dims);
        union
            .iter()
            .map(|l| labels.iter().position(|x| x == l).map_or(0, |p| s[p]))
            .collect()
    };
    let sa = stride_in(&a.labels, &a.dims);
    let sb = stride_in(&b.labels, &b.dims);
    let sc = stride_in(&out_labels, &out_dims);

    let mut out = vec![0.0; out_dims.iter().product()];
    let total: usize = union_dims.iter().product();
    if total == 0 {
        return Labeled { labels: out_labels, dims: out_dims, data: out };
    }
    let k = union.len();
    let mut idx = vec![0usize; k];
    let (mut oa, mut ob, mut oc) = (0usize, 0usize, 0usize);
    for _ in 0..total {
        out[oc] += a.data[oa] * b.data[ob];
        for pos in (0..k).rev() {
            idx[pos] += 1;
            oa += sa[pos];
            ob += sb[pos];
            oc += sc[pos];
            if idx[pos] < union_dims[pos] {
                break;
            }
            oa -= sa[pos] * union_dims[pos];
            ob -= sb[pos] * union_dims[pos];
            oc -= sc[pos] * union_dims[pos];
            idx[pos] = 0;
        }
    }
    Labeled { labels: out_labels, dims: out_dims, data: out }
}

fn permute(t: &Labeled, order: &[usize]) -> Labeled {
    if t.labels == order {
        return t.clone();
    }
    let src_strides = strides_of(&t.dims);
    let perm: Vec<usize> = order
        .iter()
        .map(|l| t.labels.iter().position(|x| x == l).expect("label present"))
        .collect();
    let dims: Vec<usize> = perm.iter().map(|&p| t.dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = t.size();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; dims.len()];
    let mut off = 0usize;
    for _ in 0..total {
        data.push(t.data[off]);
        for pos in (0..dims.len()).rev() {
            idx[pos] += 1;
            off += strides[pos];
            if idx[pos] < dims[pos] {
                break;
            }
            off -= strides[pos] * dims[pos];
            idx[pos] = 0;
        }
    }
    Labeled { labels: order.to_vec(), dims, data }
}

/// Evaluates `expr` over `operands`. Each operand's full axis list is its
/// batch extents followed by its factored axes; an ellipsis term consumes
/// the leading extents not covered by explicit subscripts. All ellipsis
/// operands must agree on those extents (no broadcasting).
pub fn contract(expr: &EinsumExpr, operands: &[&DenseTensor], order: ContractOrder) -> Result<DenseTensor> {
    let parsed = Parsed::new(expr.text())?;
    ensure!(
        parsed.inputs.len() == operands.len(),
        Contraction,
        "expression takes {} operands, got {}",
        parsed.inputs.len(),
        operands.len()
    );

    let mut ellipsis_dims: Option<Vec<usize>> = None;
    let mut char_ids: BTreeMap<char, usize> = BTreeMap::new();
    let mut extent: BTreeMap<usize, usize> = BTreeMap::new();
    // Ellipsis axes take ids 0..E; subscripts are numbered after them.
    const CHAR_BASE: usize = 1 << 20;

    let mut work = Vec::with_capacity(operands.len());
    for (term, op) in parsed.inputs.iter().zip(operands) {
        let mut full_dims = op.batch().to_vec();
        full_dims.extend_from_slice(op.shape().dims());
        ensure!(
            full_dims.len() >= term.chars.len(),
            Contraction,
            "term with {} subscripts applied to a {}-axis operand",
            term.chars.len(),
            full_dims.len()
        );
        let lead = full_dims.len() - term.chars.len();
        let mut labels = Vec::with_capacity(full_dims.len());
        if term.ellipsis {
            let e = full_dims[..lead].to_vec();
            match &ellipsis_dims {
                Some(prev) => ensure!(
                    *prev == e,
                    Contraction,
                    "ellipsis extents {e:?} disagree with {prev:?}"
                ),
                None => ellipsis_dims = Some(e),
            }
            labels.extend(0..lead);
        } else {
            ensure!(
                lead == 0,
                Contraction,
                "term has {} subscripts but operand has {} axes",
                term.chars.len(),
                full_dims.len()
            );
        }
        for &c in &term.chars {
            let next = CHAR_BASE + char_ids.len();
            labels.push(*char_ids.entry(c).or_insert(next));
        }
        for (l, &d) in labels.iter().zip(&full_dims) {
            if let Some(&prev) = extent.get(l) {
                ensure!(prev == d, Contraction, "extent mismatch on a subscript: {prev} vs {d}");
            } else {
                extent.insert(*l, d);
            }
        }
        work.push(Labeled { labels, dims: full_dims, data: op.data().to_vec() });
    }

    let e_dims = ellipsis_dims.unwrap_or_default();
    let mut out_labels: Vec<usize> = if parsed.output.ellipsis { (0..e_dims.len()).collect() } else { Vec::new() };
    out_labels.extend(parsed.output.chars.iter().map(|c| char_ids[c]));
    let out_set: HashSet<usize> = out_labels.iter().copied().collect();

    let keep_for = |rest: &[&Labeled]| -> HashSet<usize> {
        let mut keep = out_set.clone();
        for t in rest {
            keep.extend(t.labels.iter().copied());
        }
        keep
    };

    while work.len() > 1 {
        let (i, j) = match order {
            ContractOrder::LeftToRight => (0, 1),
            ContractOrder::Greedy => {
                let mut best = (usize::MAX, 0, 1);
                for i in 0..work.len() {
                    for j in i + 1..work.len() {
                        let others: Vec<&Labeled> = work
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| *k != i && *k != j)
                            .map(|(_, t)| t)
                            .collect();
                        let keep = keep_for(&others);
                        let mut labels: HashSet<usize> = work[i].labels.iter().copied().collect();
                        labels.extend(work[j].labels.iter().copied());
                        let size: usize = labels.iter().filter(|l| keep.contains(l)).map(|l| extent[l]).product();
                        if size < best.0 {
                            best = (size, i, j);
                        }
                    }
                }
                (best.1, best.2)
            }
        };
        let others: Vec<&Labeled> =
            work.iter().enumerate().filter(|(k, _)| *k != i && *k != j).map(|(_, t)| t).collect();
        let keep = keep_for(&others);
        let merged = contract_pair(&work[i], &work[j], &keep, &extent);
        work.remove(j);
        work[i] = merged;
    }

    let mut last = work.pop().expect("at least one operand");
    if last.labels.iter().any(|l| !out_set.contains(l)) {
        let scalar = Labeled { labels: Vec::new(), dims: Vec::new(), data: vec![1.0] };
        last = contract_pair(&last, &scalar, &out_set, &extent);
    }
    let last = permute(&last, &out_labels);

    let shape_dims: Vec<usize> = last.dims[e_dims.len()..].to_vec();
    let shape = if shape_dims.is_empty() { AxisShape::new(vec![1])? } else { AxisShape::new(shape_dims)? };
    DenseTensor::new(e_dims, shape, last.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn golden_three_axis_strings() {
        assert_eq!(gen_apply_expr(3).unwrap().text(), "...abc,efbc,diaf,ghde->...ghi");
        assert_eq!(gen_operator_expr(3).unwrap().text(), "efbc,diaf,ghde->ghiabc");
        assert_eq!(gen_apply_expr(3).unwrap().operand_count(), 4);
    }

    #[test]
    fn two_axis_has_single_gate() {
        let e = gen_apply_expr(2).unwrap();
        assert_eq!(e.text(), "...ab,cdab->...cd");
        assert_eq!(e.operand_count(), 2);
        assert_eq!(gen_operator_expr(2).unwrap().text(), "cdab->cdab");
    }

    #[test]
    fn operand_counts() {
        for n in 2..=6 {
            assert_eq!(gen_apply_expr(n).unwrap().operand_count(), 1 + n * (n - 1) / 2);
        }
        assert!(gen_apply_expr(1).is_err());
        assert!(gen_operator_expr(0).is_err());
    }

    #[test]
    fn all_pairs_order_matches_negative_combinations() {
        assert_eq!(all_pairs_order(3), vec![(1, 2), (0, 2), (0, 1)]);
        assert_eq!(all_pairs_order(4), vec![(2, 3), (1, 3), (0, 3), (1, 2), (0, 2), (0, 1)]);
    }

    #[test]
    fn symbols_extend_past_z() {
        assert_eq!(symbol(0), 'a');
        assert_eq!(symbol(25), 'z');
        assert_eq!(symbol(26), 'A');
        assert_eq!(symbol(51), 'Z');
        assert_eq!(symbol(52), char::from_u32(192).unwrap());
        // Eight axes need 64 distinct symbols.
        let e = gen_apply_expr(8).unwrap();
        assert_eq!(EinsumExpr::parse(e.text()).unwrap().operand_count(), 29);
    }

    fn tensor(batch: Vec<usize>, dims: Vec<usize>, data: Vec<f64>) -> DenseTensor {
        DenseTensor::new(batch, AxisShape::new(dims).unwrap(), data).unwrap()
    }

    #[test]
    fn identity_matvec() {
        let e = EinsumExpr::parse("ab,b->a").unwrap();
        let id = tensor(vec![], vec![3, 3], Matrix::identity(3).into_vec());
        let v = tensor(vec![], vec![3], vec![1.5, -2.0, 7.0]);
        for order in [ContractOrder::LeftToRight, ContractOrder::Greedy] {
            assert_eq!(contract(&e, &[&id, &v], order).unwrap().data(), v.data());
        }
    }

    #[test]
    fn three_operand_contraction_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (i, j, k, l) = (3, 4, 2, 3);
        let a = Matrix::gaussian(1, i * j, 1.0, &mut rng).into_vec();
        let b = Matrix::gaussian(1, j * k * l, 1.0, &mut rng).into_vec();
        let c = Matrix::gaussian(1, l * i, 1.0, &mut rng).into_vec();
        let e = EinsumExpr::parse("ij,jkl,li->k").unwrap();
        let ta = tensor(vec![], vec![i, j], a.clone());
        let tb = tensor(vec![], vec![j, k, l], b.clone());
        let tc = tensor(vec![], vec![l, i], c.clone());
        let mut oracle = vec![0.0; k];
        for (kk, o) in oracle.iter_mut().enumerate() {
            for ii in 0..i {
                for jj in 0..j {
                    for ll in 0..l {
                        *o += a[ii * j + jj] * b[(jj * k + kk) * l + ll] * c[ll * i + ii];
                    }
                }
            }
        }
        for order in [ContractOrder::LeftToRight, ContractOrder::Greedy] {
            let got = contract(&e, &[&ta, &tb, &tc], order).unwrap();
            for (g, o) in got.data().iter().zip(&oracle) {
                assert!((g - o).abs() <= 1e-13, "{g} vs {o}");
            }
        }
    }

    #[test]
    fn identity_gates_leave_state_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = tensor(vec![2], vec![2, 3, 2], Matrix::gaussian(1, 24, 1.0, &mut rng).into_vec());
        let gate = |a: usize, b: usize| tensor(vec![], vec![a, b, a, b], Matrix::identity(a * b).into_vec());
        // order (1,2), (0,2), (0,1)
        let (g1, g2, g3) = (gate(3, 2), gate(2, 2), gate(2, 3));
        let y = contract(&gen_apply_expr(3).unwrap(), &[&x, &g1, &g2, &g3], ContractOrder::LeftToRight).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.batch(), &[2]);
    }

    #[test]
    fn contraction_errors() {
        let v = tensor(vec![], vec![3], vec![0.0; 3]);
        let m = tensor(vec![], vec![2, 2], vec![0.0; 4]);
        let e = EinsumExpr::parse("ab,b->a").unwrap();
        assert!(matches!(contract(&e, &[&m, &v], ContractOrder::LeftToRight), Err(Error::Contraction(_))));
        assert!(matches!(contract(&e, &[&m], ContractOrder::LeftToRight), Err(Error::Contraction(_))));
        assert!(EinsumExpr::parse("ab,b").is_err());
        assert!(EinsumExpr::parse("aa->a").is_err());
        assert!(EinsumExpr::parse("ab->c").is_err());
    }
}
