//! Auto-sizing surface: maps a scope onto regularization groups, detects
//! dead groups after training, and compacts them out of the model.
//!
//! Group geometry: a feed-forward unit is one row of w1 together with its
//! b1 entry and the same-indexed column of w2. An attention score
//! dimension is a (wq row, wk row) pair — the two meet in the score dot
//! product, so they are only deletable together — and an attention value
//! dimension is a wv row paired with a wo column. Deleting rows never
//! changes the score scale, which stays at 1/sqrt(d_model/num_heads).

use std::collections::{HashMap, HashSet};

use crate::checkpoint;
use crate::config::{AttnWidths, LayerWidths, ModelLayout};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::prox::{GroupAxis, GroupSpec};

/// Which sub-components receive the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutosizeScope {
    /// Every attention and feed-forward sub-component, encoder and decoder.
    All,
    /// Attention and feed-forward sub-components of encoder layers only.
    Encoder,
    /// Feed-forward w1 matrices of encoder and decoder layers only.
    Ffn,
}

impl AutosizeScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AutosizeScope::All),
            "encoder" => Ok(AutosizeScope::Encoder),
            "ffn" => Ok(AutosizeScope::Ffn),
            other => Err(Error::InvalidArg(format!(
                "unknown scope `{other}` (expected all, encoder or ffn)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AutosizeScope::All => "all",
            AutosizeScope::Encoder => "encoder",
            AutosizeScope::Ffn => "ffn",
        }
    }
}

fn attn_specs(prefix: &str, widths: &AttnWidths, out: &mut Vec<GroupSpec>) {
    let qk = widths.qk_total();
    let v = widths.v_total();
    if qk > 0 {
        out.push(GroupSpec::rows(format!("{prefix}.wq"), qk));
        out.push(GroupSpec::rows(format!("{prefix}.wk"), qk));
    }
    if v > 0 {
        out.push(GroupSpec::rows(format!("{prefix}.wv"), v));
    }
}

/// The group specs a scope selects on this model. Embeddings, the output
/// projection, norms and all biases are never included.
pub fn scope_to_groups(model: &TransformerModel, scope: AutosizeScope) -> Vec<GroupSpec> {
    let mut specs = Vec::new();
    let sides: &[(&str, &[LayerWidths])] = &[
        ("encoder", &model.layout.encoder),
        ("decoder", &model.layout.decoder),
    ];
    for (side, layers) in sides {
        if *side == "decoder" && scope == AutosizeScope::Encoder {
            continue;
        }
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("{side}.layer{i}");
            if scope != AutosizeScope::Ffn {
                attn_specs(&format!("{p}.self_attn"), &layer.self_attn, &mut specs);
                if let Some(cross) = &layer.cross_attn {
                    attn_specs(&format!("{p}.cross_attn"), cross, &mut specs);
                }
            }
            if layer.ffn > 0 {
                specs.push(GroupSpec::rows(format!("{p}.ffn.w1"), layer.ffn));
            }
        }
    }
    specs
}

/// Dead-group indices per spec: a group is dead iff every entry of the
/// matrix slice is exactly 0.0.
pub fn detect_dead_groups(
    model: &TransformerModel,
    specs: &[GroupSpec],
) -> Result<Vec<(GroupSpec, Vec<usize>)>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let param = model
            .params
            .get(&spec.param_path)
            .ok_or_else(|| Error::UnknownParam { path: spec.param_path.clone() })?;
        if !spec.matches(&param.shape) {
            return Err(Error::ShapeMismatch {
                op: "detect_dead_groups",
                lhs: param.shape.clone(),
                rhs: vec![spec.group_count],
            });
        }
        let (rows, cols) = (param.shape[0], param.shape[1]);
        let mut dead = Vec::new();
        match spec.group_axis {
            GroupAxis::Rows => {
                for (r, row) in param.data.chunks_exact(cols).enumerate() {
                    if row.iter().all(|&v| v == 0.0) {
                        dead.push(r);
                    }
                }
            }
            GroupAxis::Cols => {
                for c in 0..cols {
                    if (0..rows).all(|r| param.data[r * cols + c] == 0.0) {
                        dead.push(c);
                    }
                }
            }
        }
        out.push((spec.clone(), dead));
    }
    Ok(out)
}

/// Zero every group whose max-abs entry is below `epsilon`. The default
/// pipeline never needs this (prox steps produce exact zeros); it exists
/// for checkpoints trained elsewhere.
pub fn zero_near_dead_groups(model: &mut TransformerModel, specs: &[GroupSpec], epsilon: f64) -> Result<usize> {
    if epsilon <= 0.0 {
        return Ok(0);
    }
    let mut zeroed = 0;
    for spec in specs {
        let param = model
            .params
            .get_mut(&spec.param_path)
            .ok_or_else(|| Error::UnknownParam { path: spec.param_path.clone() })?;
        let cols = param.shape[1];
        debug_assert_eq!(spec.group_axis, GroupAxis::Rows);
        for row in param.data.chunks_exact_mut(cols) {
            let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max > 0.0 && max < epsilon {
                row.fill(0.0);
                zeroed += 1;
            }
        }
    }
    Ok(zeroed)
}

/// Per-matrix prune statistics plus model totals.
#[derive(Debug, Clone)]
pub struct PruneReport {
    pub matrices: Vec<MatrixPruneStat>,
    pub params_before: usize,
    pub params_after: usize,
    pub bytes_before: u64,
    pub bytes_after: u64,
    /// quality metric slot, filled by evaluation when available
    pub quality: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixPruneStat {
    pub param_path: String,
    pub total_groups: usize,
    pub zero_groups: usize,
}

impl PruneReport {
    pub fn total_zero_groups(&self) -> usize {
        self.matrices.iter().map(|m| m.zero_groups).sum()
    }

    /// One key=value record per line, machine-readable.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for m in &self.matrices {
            out.push_str(&format!(
                "matrix={} groups={} zero_groups={}\n",
                m.param_path, m.total_groups, m.zero_groups
            ));
        }
        out.push_str(&format!(
            "params_before={} params_after={} bytes_before={} bytes_after={}\n",
            self.params_before, self.params_after, self.bytes_before, self.bytes_after
        ));
        out
    }
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn delete_entries(data: &[f64], len: usize, dead: &[usize]) -> Vec<f64> {
    let dead: HashSet<usize> = dead.iter().copied().collect();
    (0..len).filter(|i| !dead.contains(i)).map(|i| data[i]).collect()
}

fn delete_matrix_rows(data: &[f64], rows: usize, cols: usize, dead: &[usize]) -> Vec<f64> {
    let dead: HashSet<usize> = dead.iter().copied().collect();
    let mut out = Vec::with_capacity((rows - dead.len()) * cols);
    for r in 0..rows {
        if !dead.contains(&r) {
            out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        }
    }
    out
}

fn delete_matrix_cols(data: &[f64], rows: usize, cols: usize, dead: &[usize]) -> Vec<f64> {
    let dead: HashSet<usize> = dead.iter().copied().collect();
    let mut out = Vec::with_capacity(rows * (cols - dead.len()));
    for r in 0..rows {
        for c in 0..cols {
            if !dead.contains(&c) {
                out.push(data[r * cols + c]);
            }
        }
    }
    out
}

/// Split flat unit indices into per-head counts given per-head widths.
fn per_head_split(dims: &[usize], dead: &[usize]) -> Vec<Vec<usize>> {
    let mut per_head: Vec<Vec<usize>> = vec![Vec::new(); dims.len()];
    let mut offsets = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    for &d in dims {
        offsets.push(acc);
        acc += d;
    }
    offsets.push(acc);
    for &idx in dead {
        let h = offsets.iter().rposition(|&o| o <= idx).unwrap().min(dims.len() - 1);
        per_head[h].push(idx - offsets[h]);
    }
    per_head
}

#[derive(Default)]
struct Edits {
    rows: HashMap<String, Vec<usize>>,
    cols: HashMap<String, Vec<usize>>,
}

fn plan_attention(
    prefix: &str,
    widths: &AttnWidths,
    dead: &HashMap<String, Vec<usize>>,
    edits: &mut Edits,
) -> AttnWidths {
    let empty = Vec::new();
    let dq: HashSet<usize> =
        dead.get(&format!("{prefix}.wq")).unwrap_or(&empty).iter().copied().collect();
    let dk: HashSet<usize> =
        dead.get(&format!("{prefix}.wk")).unwrap_or(&empty).iter().copied().collect();
    let dv = dead.get(&format!("{prefix}.wv")).cloned().unwrap_or_default();

    // a score dimension dies only when its query and key rows are both
    // dead; a dead pair shifts every score by a constant, which the
    // softmax ignores, so deletion is exact
    let qk_pairs: Vec<usize> = sorted_unique(dq.intersection(&dk).copied().collect());
    let dv = sorted_unique(dv);

    let mut new = widths.clone();
    for (h, head_dead) in per_head_split(&widths.qk_dims, &qk_pairs).iter().enumerate() {
        new.qk_dims[h] -= head_dead.len();
    }
    for (h, head_dead) in per_head_split(&widths.v_dims, &dv).iter().enumerate() {
        new.v_dims[h] -= head_dead.len();
    }

    for name in ["wq", "bq", "wk", "bk"] {
        edits.rows.insert(format!("{prefix}.{name}"), qk_pairs.clone());
    }
    edits.rows.insert(format!("{prefix}.wv"), dv.clone());
    edits.rows.insert(format!("{prefix}.bv"), dv.clone());
    edits.cols.insert(format!("{prefix}.wo"), dv);
    new
}

/// Delete dead groups from the model: feed-forward rows together with
/// their biases and paired w2 columns; attention (wq, wk) row pairs; and
/// attention wv rows together with their paired wo columns. The returned
/// model computes the same function (up to floating-point reassociation)
/// and owns a strictly smaller registry whenever anything was deleted.
pub fn compact(
    model: &TransformerModel,
    dead: &[(GroupSpec, Vec<usize>)],
    vocab: &Vocab,
) -> Result<(TransformerModel, PruneReport)> {
    // validate: every listed index refers to an exactly-zero group
    let mut dead_map: HashMap<String, Vec<usize>> = HashMap::new();
    for (spec, indices) in dead {
        let param = model
            .params
            .get(&spec.param_path)
            .ok_or_else(|| Error::UnknownParam { path: spec.param_path.clone() })?;
        let (rows, cols) = (param.shape[0], param.shape[1]);
        for &r in indices {
            if r >= rows {
                return Err(Error::InvalidArg(format!(
                    "dead index {r} out of range for {} with {rows} groups",
                    spec.param_path
                )));
            }
            if param.data[r * cols..(r + 1) * cols].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidArg(format!(
                    "refusing to delete non-zero group {}[{r}]",
                    spec.param_path
                )));
            }
        }
        dead_map.insert(spec.param_path.clone(), sorted_unique(indices.clone()));
    }

    let mut edits = Edits::default();
    let mut new_layout = ModelLayout { encoder: Vec::new(), decoder: Vec::new() };
    let sides: &[(&str, &[LayerWidths], bool)] = &[
        ("encoder", &model.layout.encoder, false),
        ("decoder", &model.layout.decoder, true),
    ];
    for (side, layers, is_decoder) in sides {
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("{side}.layer{i}");
            let self_attn =
                plan_attention(&format!("{p}.self_attn"), &layer.self_attn, &dead_map, &mut edits);
            let cross_attn = layer.cross_attn.as_ref().map(|cross| {
                plan_attention(&format!("{p}.cross_attn"), cross, &dead_map, &mut edits)
            });
            let ffn_dead = dead_map.get(&format!("{p}.ffn.w1")).cloned().unwrap_or_default();
            let ffn = layer.ffn - ffn_dead.len();
            edits.rows.insert(format!("{p}.ffn.w1"), ffn_dead.clone());
            edits.rows.insert(format!("{p}.ffn.b1"), ffn_dead.clone());
            edits.cols.insert(format!("{p}.ffn.w2"), ffn_dead);
            let widths = LayerWidths { self_attn, cross_attn, ffn };
            if *is_decoder {
                new_layout.decoder.push(widths);
            } else {
                new_layout.encoder.push(widths);
            }
        }
    }

    let mut compacted = TransformerModel::with_layout(model.config.clone(), new_layout, 0)?;
    for p in compacted.params.iter_mut() {
        let old = model
            .params
            .get(&p.path)
            .unwrap_or_else(|| panic!("compaction produced unknown path {}", p.path));
        let rows_dead = edits.rows.get(&p.path);
        let cols_dead = edits.cols.get(&p.path);
        let mut data = match (old.shape.len(), rows_dead) {
            (1, Some(dead)) => delete_entries(&old.data, old.shape[0], dead),
            (2, Some(dead)) => delete_matrix_rows(&old.data, old.shape[0], old.shape[1], dead),
            _ => old.data.clone(),
        };
        if let Some(dead) = cols_dead {
            let rows_now = if let Some(rd) = rows_dead { old.shape[0] - rd.len() } else { old.shape[0] };
            data = delete_matrix_cols(&data, rows_now, old.shape[1], dead);
        }
        assert_eq!(data.len(), p.numel(), "compacted data mismatch for {}", p.path);
        p.data = data;
    }

    let matrices = dead
        .iter()
        .map(|(spec, indices)| MatrixPruneStat {
            param_path: spec.param_path.clone(),
            total_groups: spec.group_count,
            zero_groups: indices.len(),
        })
        .collect();
    let report = PruneReport {
        matrices,
        params_before: model.param_count(),
        params_after: compacted.param_count(),
        bytes_before: checkpoint::serialized_size(model, vocab),
        bytes_after: checkpoint::serialized_size(&compacted, vocab),
        quality: Vec::new(),
    };
    Ok((compacted, report))
}

/// One line of the size/quality comparison table.
#[derive(Debug, Clone)]
pub struct SystemRow {
    pub name: String,
    pub disk_bytes: u64,
    pub params: usize,
    pub metrics: Vec<(String, f64)>,
}

pub fn format_bytes(bytes: u64) -> String {
    const MIB: f64 = 1024.0 * 1024.0;
    const KIB: f64 = 1024.0;
    let b = bytes as f64;
    if b >= MIB {
        format!("{:.1}M", b / MIB)
    } else if b >= KIB {
        format!("{:.1}K", b / KIB)
    } else {
        format!("{bytes}B")
    }
}

fn format_params(params: usize) -> String {
    if params >= 1_000_000 {
        format!("{:.1}M", params as f64 / 1e6)
    } else if params >= 1_000 {
        format!("{:.1}K", params as f64 / 1e3)
    } else {
        format!("{params}")
    }
}

/// Aligned plain-text comparison: one row per system with disk size,
/// parameter count and any attached quality metrics.
pub fn render_table(rows: &[SystemRow]) -> String {
    let mut metric_names: Vec<String> = Vec::new();
    for row in rows {
        for (name, _) in &row.metrics {
            if !metric_names.iter().any(|n| n == name) {
                metric_names.push(name.clone());
            }
        }
    }
    let mut header = vec!["System".to_string(), "Disk Size".to_string(), "Number of Parameters".to_string()];
    header.extend(metric_names.iter().cloned());

    let mut body: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    for row in rows {
        let mut line = vec![row.name.clone(), format_bytes(row.disk_bytes), format_params(row.params)];
        for name in &metric_names {
            let cell = row
                .metrics
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| format!("{v:.2}"))
                .unwrap_or_else(|| "-".to_string());
            line.push(cell);
        }
        body.push(line);
    }

    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for line in &body {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let render_line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:>width$}", width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = render_line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for line in &body {
        out.push_str(&render_line(line));
        out.push('\n');
    }
    out
}

/// Machine-readable records, one system per line.
pub fn render_records(rows: &[SystemRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!(
            "system={} disk_bytes={} params={}",
            row.name, row.disk_bytes, row.params
        ));
        for (name, value) in &row.metrics {
            out.push_str(&format!(" {name}={value:.4}"));
        }
        out.push('\n');
    }
    out
}

/// Check helper used by tests and the CLI: does this path fall under the
/// scope's allowed prefixes?
pub fn path_in_scope(path: &str, scope: AutosizeScope) -> bool {
    match scope {
        AutosizeScope::All => true,
        AutosizeScope::Encoder => path.starts_with("encoder."),
        AutosizeScope::Ffn => path.contains(".ffn."),
    }
}
