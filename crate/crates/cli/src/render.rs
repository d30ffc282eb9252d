use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tlm::framework::RunReport;
use tlm::models::ModelKind;
use tlm::{IterationReport, ViewKind, ViewSpec};

const LEAKERS_SHOWN: usize = 8;

fn pct(acc: Option<f64>) -> String {
    acc.map_or_else(|| "-".into(), |a| format!("{:.2}", a * 100.0))
}

fn view_label(v: &ViewSpec) -> String {
    let shape = match v.kind {
        ViewKind::TcpPayload => format!("tcp_payload {}x{}", v.packets, v.bytes_per_packet),
        ViewKind::TlsAppData => format!("tls_app_data {}x{}", v.packets, v.bytes_per_packet),
        ViewKind::ConcatTls => format!("concat_tls {}", v.concat_length),
    };
    if v.per_packet_mask.is_empty() {
        shape
    } else {
        format!("{shape} mask [{},{})", v.per_packet_mask.start, v.per_packet_mask.end)
    }
}

fn leakers(it: &IterationReport) -> String {
    let o = &it.selection.offsets;
    if o.is_empty() {
        return "-".into();
    }
    let mut s = o
        .iter()
        .take(LEAKERS_SHOWN)
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",");
    if o.len() > LEAKERS_SHOWN {
        write!(s, ",... ({} total)", o.len()).unwrap();
    }
    format!("{{{s}}}")
}

/// Accuracy per model and iteration, then the per-iteration details. Depends
/// on nothing but the report.
pub fn render_report(r: &RunReport) -> String {
    let mut out = String::new();
    let d = &r.dataset;
    writeln!(
        out,
        "dataset: {} sessions, {} segments, {} classes",
        d.sessions,
        d.segments,
        d.class_names.len()
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "The accuracy of each ML model (%)").unwrap();

    let mut header = format!("{:<10}", "Model");
    for it in &r.iterations {
        write!(header, "  {:>8}", format!("Itr. {}", it.index + 1)).unwrap();
    }
    writeln!(out, "{}", header.trim_end()).unwrap();
    for kind in [ModelKind::Cnn, ModelKind::DecisionTree] {
        let mut row = format!("{:<10}", kind.display_name());
        for it in &r.iterations {
            write!(row, "  {:>8}", pct(it.accuracy_of(kind))).unwrap();
        }
        writeln!(out, "{}", row.trim_end()).unwrap();
    }
    writeln!(out).unwrap();

    writeln!(
        out,
        "{:<5} {:<36} {:>6} {:>7} {:>6}  Leakers",
        "Itr.", "View", "Chance", "Conc.", "DT~NN"
    )
    .unwrap();
    for it in &r.iterations {
        writeln!(
            out,
            "{:<5} {:<36} {:>6} {:>7.3} {:>6}  {}",
            it.index + 1,
            view_label(&it.view),
            pct(Some(it.chance_level)),
            it.selection.concentration,
            if it.dt_close_to_nn { "yes" } else { "no" },
            leakers(it)
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    match r.termination_reason {
        Some(reason) => writeln!(out, "stopped after {} iterations: {reason:?}", r.iterations.len()).unwrap(),
        None => writeln!(out, "stopped after {} iterations", r.iterations.len()).unwrap(),
    }
    out
}

/// Per-offset impact of one iteration as `offset<TAB>importance` lines.
pub fn offset_tsv(it: &IterationReport) -> String {
    let mut out = String::from("offset\timportance\n");
    for (i, v) in it.impact.offset_values().iter().enumerate() {
        writeln!(out, "{i}\t{v}").unwrap();
    }
    out
}

/// Writes one `iterNN_offsets.tsv` per iteration into `dir`.
pub fn write_plot_data(r: &RunReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    r.iterations
        .iter()
        .map(|it| {
            let path = dir.join(format!("iter{:02}_offsets.tsv", it.index + 1));
            std::fs::write(&path, offset_tsv(it))?;
            Ok(path)
        })
        .collect()
}
