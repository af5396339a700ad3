//! Length-generalization sweep and its CSV/SVG export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::ge2e::SpeakerEncoderNet;
use crate::metrics::{
    attention_diagonal_score, cosine_similarity, mcd, silence_rate, token_error_rate, write_reports, RunReport,
    MCD_COEFFS,
};
use crate::numcore::{seeded_rng, ParamStore, Tensor};
use crate::synthesizer::{SynthOutput, SynthesisOptions, Synthesizer};

use super::config::ExperimentConfig;
use super::render::render_waveform;
use super::task::{sub_seed, SyntheticTask};
use super::train::{embed_utterance, SYNTH_FRAME_MS, SYNTH_HOP_MS};

/// A trained synthesizer entered into the sweep.
pub struct SweepModel<'a> {
    pub name: String,
    pub synth: &'a Synthesizer,
    pub params: &'a ParamStore,
    /// Conditioning vector per task speaker.
    pub dvectors: Vec<Vec<f64>>,
}

/// Optional speaker encoder for the cosine-similarity column.
pub struct SweepEncoder<'a> {
    pub config: &'a ExperimentConfig,
    pub net: &'a SpeakerEncoderNet,
    pub params: &'a ParamStore,
}

/// One evaluation utterance shared by every model.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepItem {
    pub id: String,
    pub speaker: usize,
    pub symbols: Vec<usize>,
    pub target: Tensor,
}

/// `sweep_utterances` utterances per speaker and length, drawn from a stream
/// that depends only on the seed, the length and the speaker. Adding lengths
/// therefore never changes the items of the others.
pub fn sweep_items(cfg: &ExperimentConfig, task: &SyntheticTask, lengths: &[usize]) -> Result<Vec<SweepItem>> {
    let mut items = Vec::new();
    for &len in lengths {
        if len == 0 {
            return Err(Error::invalid("sweep lengths must be positive"));
        }
        for speaker in 0..task.n_speakers() {
            let mut rng = seeded_rng(sub_seed(cfg.seed, &format!("sweep-{len}-{speaker}")));
            for k in 0..cfg.sweep_utterances {
                let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.alphabet)).collect();
                let target = task.render(&symbols, speaker, &mut rng)?;
                items.push(SweepItem {
                    id: format!("len{len:04}_s{speaker:02}_u{k:02}"),
                    speaker,
                    symbols,
                    target,
                });
            }
        }
    }
    Ok(items)
}

/// Decoder step budget for an utterance of `len` symbols.
pub fn max_steps(cfg: &ExperimentConfig, task: &SyntheticTask, len: usize) -> usize {
    (cfg.max_steps_factor * (len * task.steps_per_symbol()) as f64).ceil() as usize + 10
}

/// Mean absolute error over the frames both mels share.
pub fn recon_error(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.cols() != target.cols() {
        return Err(Error::shape("recon_error", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.rows().min(target.rows()) * pred.cols();
    if n == 0 {
        return Err(Error::invalid("no common frames to compare"));
    }
    Ok(pred.data()[..n].iter().zip(&target.data()[..n]).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

fn score(
    task: &SyntheticTask,
    model: &SweepModel,
    item: &SweepItem,
    out: &SynthOutput,
    encoder: Option<&SweepEncoder>,
) -> Result<RunReport> {
    let pred = &out.mel_after;
    let hyp = task.decode(pred, item.speaker)?;
    let as_mel = |t: &Tensor| MelSpectrogram::new(t.clone(), SYNTH_FRAME_MS, SYNTH_HOP_MS);
    let mcd_value = if task.mel_channels > MCD_COEFFS {
        Some(mcd(&as_mel(pred)?, &as_mel(&item.target)?)?)
    } else {
        None
    };
    let cosine = match encoder {
        Some(e) => Some(cosine_similarity(
            &embed_utterance(e.config, e.net, e.params, pred)?,
            &embed_utterance(e.config, e.net, e.params, &item.target)?,
        )?),
        None => None,
    };
    let report = RunReport {
        model: model.name.clone(),
        utterance_id: item.id.clone(),
        speaker: item.speaker,
        text_len: item.symbols.len(),
        a_s: attention_diagonal_score(&out.alignment)?,
        mcd: mcd_value,
        recon_error: recon_error(pred, &item.target)?,
        cer: token_error_rate(&item.symbols, &hyp)?,
        silence_rate: silence_rate(&render_waveform(pred, SYNTH_HOP_MS)?)?,
        cosine,
        truncated: out.truncated,
    };
    report.validate()?;
    Ok(report)
}

/// Synthesizes every sweep item with every model and scores the output.
/// Rows come back model-major, then in item order.
pub fn evaluate_length_sweep(
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
    models: &[SweepModel],
    lengths: &[usize],
    encoder: Option<&SweepEncoder>,
) -> Result<Vec<RunReport>> {
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    for m in models {
        if m.dvectors.len() < task.n_speakers() {
            return Err(Error::invalid(format!("model {} lacks d-vectors for every speaker", m.name)));
        }
        if m.synth.config.n_symbols != task.alphabet || m.synth.config.mel_channels != task.mel_channels {
            return Err(Error::Config(format!("model {} does not match the task's alphabet or mel size", m.name)));
        }
    }
    let items = sweep_items(cfg, task, lengths)?;
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..items.len()).map(move |i| (m, i))).collect();
    jobs.par_iter()
        .map(|&(m, i)| {
            let (model, item) = (&models[m], &items[i]);
            let mut opts = SynthesisOptions::new(max_steps(cfg, task, item.symbols.len()));
            opts.stop_threshold = cfg.stop_threshold;
            if cfg.inference_prenet_dropout {
                opts.prenet_seed = Some(sub_seed(cfg.seed, &format!("prenet/{m}/{i}")));
            }
            let out = model.synth.synthesize(model.params, &item.symbols, &model.dvectors[item.speaker], &opts)?;
            score(task, model, item, &out, encoder)
        })
        .collect()
}

/// Mean of a metric per (model, length), in sorted key order.
pub fn length_means(reports: &[RunReport], metric: impl Fn(&RunReport) -> f64) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = acc.entry((r.model.clone(), r.text_len)).or_insert((0.0, 0));
        e.0 += metric(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Files written by [`export_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

pub const SUMMARY_HEADER: &str = "model,text_len,n,a_s,cer,silence_rate,recon_error,truncated_fraction";

/// Writes per-utterance rows to `path`, length-binned means to
/// `<stem>_summary.csv` and the two-panel plot to `<stem>.svg`.
pub fn export_report(reports: &[RunReport], path: &Path) -> Result<ExportedFiles> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to export"));
    }
    let stem = path.with_extension("");
    let summary = PathBuf::from(format!("{}_summary.csv", stem.display()));
    let plot = stem.with_extension("svg");
    write_reports(path, reports)?;
    std::fs::write(&summary, summary_csv(reports)).map_err(|e| Error::io(&summary, e))?;
    std::fs::write(&plot, svg_plot(reports)).map_err(|e| Error::io(&plot, e))?;
    Ok(ExportedFiles {
        rows: path.to_path_buf(),
        summary,
        plot,
    })
}

pub fn summary_csv(reports: &[RunReport]) -> String {
    let count = length_means(reports, |_| 1.0);
    let a_s = length_means(reports, |r| r.a_s);
    let cer = length_means(reports, |r| r.cer);
    let sil = length_means(reports, |r| r.silence_rate);
    let rec = length_means(reports, |r| r.recon_error);
    let tr = length_means(reports, |r| f64::from(u8::from(r.truncated)));
    let mut n: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for r in reports {
        *n.entry((r.model.clone(), r.text_len)).or_default() += 1;
    }
    let mut out = format!("{SUMMARY_HEADER}\n");
    for key in count.keys() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            key.0, key.1, n[key], a_s[key], cer[key], sil[key], rec[key], tr[key]
        );
    }
    out
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 50.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean CER and mean silence rate against text length, one polyline per
/// model in each panel, log-scaled length axis.
pub fn svg_plot(reports: &[RunReport]) -> String {
    let panels: [(&str, BTreeMap<(String, usize), f64>); 2] = [
        ("mean CER", length_means(reports, |r| r.cer)),
        ("mean silence rate", length_means(reports, |r| r.silence_rate)),
    ];
    let mut models: Vec<String> = reports.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let (lmin, lmax) = reports
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.text_len), hi.max(r.text_len)));
    let (lx0, lx1) = ((lmin as f64).ln(), (lmax as f64).ln().max((lmin as f64).ln() + 1e-9));
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * models.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (p, (title, means)) in panels.iter().enumerate() {
        let ox = p as f64 * (PANEL_W + 2.0 * MARGIN) + MARGIN;
        let ymax = means.values().cloned().fold(0.0f64, f64::max).max(1e-9) * 1.05;
        let x = |len: usize| ox + ((len as f64).ln() - lx0) / (lx1 - lx0) * PANEL_W;
        let y = |v: f64| MARGIN + PANEL_H - v / ymax * PANEL_H;
        let _ = writeln!(s, r#"<g class="panel" data-metric="{title}">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{ox}" y="{MARGIN}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, ox + PANEL_W / 2.0, MARGIN - 10.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">text length (symbols)</text>"#,
            ox + PANEL_W / 2.0,
            MARGIN + PANEL_H + 32.0
        );
        let mut lens: Vec<usize> = reports.iter().map(|r| r.text_len).collect();
        lens.sort_unstable();
        lens.dedup();
        for &l in &lens {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{l}</text>"#,
                x(l),
                MARGIN + PANEL_H + 14.0
            );
        }
        for k in 0..=4 {
            let v = ymax * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, ox - 4.0, y(v) + 4.0);
        }
        for (mi, m) in models.iter().enumerate() {
            let pts: Vec<String> = means
                .iter()
                .filter(|((name, _), _)| name == m)
                .map(|((_, l), v)| format!("{:.2},{:.2}", x(*l), y(*v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-model="{m}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                COLOURS[mi % COLOURS.len()],
                pts.join(" ")
            );
        }
        let _ = writeln!(s, "</g>");
    }
    for (mi, m) in models.iter().enumerate() {
        let ly = MARGIN + PANEL_H + 50.0 + 20.0 * mi as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{m}</text>"#,
            MARGIN + 20.0,
            COLOURS[mi % COLOURS.len()],
            MARGIN + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{build_synthesizer, random_dvectors};
    use crate::metrics::read_reports;

    fn report(model: &str, len: usize, cer: f64) -> RunReport {
        RunReport {
            model: model.into(),
            utterance_id: format!("len{len}"),
            speaker: 0,
            text_len: len,
            a_s: 0.5,
            mcd: None,
            recon_error: 0.1,
            cer,
            silence_rate: 0.25,
            cosine: None,
            truncated: false,
        }
    }

    #[test]
    fn single_report_exports_header_and_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_report(&[report("lsa", 5, 0.1)], &dir.path().join("sweep.csv")).unwrap();
        let text = std::fs::read_to_string(&files.rows).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_reports(&files.rows).unwrap(), vec![report("lsa", 5, 0.1)]);
        assert!(files.summary.ends_with("sweep_summary.csv") && files.plot.ends_with("sweep.svg"));
        assert!(export_report(&[], &dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn re_export_is_byte_identical() {
        let reports: Vec<RunReport> = [5, 10, 20].iter().map(|&l| report("dca", l, l as f64 / 40.0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let a = export_report(&reports, &dir.path().join("a.csv")).unwrap();
        let b = export_report(&reports, &dir.path().join("b.csv")).unwrap();
        for (x, y) in [(a.rows, b.rows), (a.summary, b.summary), (a.plot, b.plot)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn plot_has_one_series_per_model_in_each_panel() {
        let mut reports = Vec::new();
        for m in ["lsa", "dca", "proposed"] {
            for l in [5, 10, 20, 50, 100] {
                reports.push(report(m, l, 0.1));
            }
        }
        let svg = svg_plot(&reports);
        assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
        assert_eq!(svg.matches(r#"class="series""#).count(), 6);
        for m in ["lsa", "dca", "proposed"] {
            assert_eq!(svg.matches(&format!(r#"data-model="{m}""#)).count(), 2);
        }
        let first = svg.lines().find(|l| l.contains(r#"class="series""#)).unwrap();
        assert_eq!(first.split("points=").nth(1).unwrap().split(' ').count(), 5);
    }

    #[test]
    fn summary_bins_by_model_and_length() {
        let reports = vec![report("a", 5, 0.0), report("a", 5, 1.0), report("a", 9, 0.5)];
        let text = summary_csv(&reports);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert!(lines[1].starts_with("a,5,2,0.5,0.5,"));
        assert!(lines[2].starts_with("a,9,1,"));
    }

    #[test]
    fn shorter_sweeps_are_subsets_of_longer_ones() {
        let cfg = ExperimentConfig::default();
        let task = SyntheticTask::from_config(&cfg).unwrap();
        let short = sweep_items(&cfg, &task, &[5, 10]).unwrap();
        let full = sweep_items(&cfg, &task, &[5, 10, 20, 50]).unwrap();
        assert!(short.iter().all(|i| full.contains(i)));
    }

    #[test]
    fn ground_truth_alignment_scores_one_when_one_step_per_symbol() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[("frames_per_symbol", "2"), ("reduction_factor", "2")])
            .unwrap();
        let task = SyntheticTask::from_config(&cfg).unwrap();
        for item in sweep_items(&cfg, &task, &[1, 7, 30]).unwrap() {
            let a = task.alignment_matrix(item.symbols.len()).unwrap();
            assert_eq!(attention_diagonal_score(&a).unwrap(), 1.0);
        }
    }

    #[test]
    fn sweep_rows_are_complete_and_deterministic() {
        let cfg = ExperimentConfig::parse(
            "model = dca\nspeakers = 2\nsweep_utterances = 1\nembedding_dim = 8\nencoder_channels = 8\n\
             encoder_lstm = 4\nprenet_dim = 8\ndecoder_dim = 8\nattention_dim = 8",
        )
        .unwrap();
        let task = SyntheticTask::from_config(&cfg).unwrap();
        let (synth, params) = build_synthesizer(&cfg).unwrap();
        let model = SweepModel {
            name: "dca".into(),
            synth: &synth,
            params: &params,
            dvectors: random_dvectors(2, cfg.ge2e_dim, 3),
        };
        let a = evaluate_length_sweep(&cfg, &task, std::slice::from_ref(&model), &[2, 3], None).unwrap();
        let b = evaluate_length_sweep(&cfg, &task, std::slice::from_ref(&model), &[2, 3], None).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        for r in &a {
            r.validate().unwrap();
            assert!(r.mcd.is_some());
        }
    }

    #[test]
    fn recon_error_uses_common_prefix() {
        let a = Tensor::filled(&[3, 2], 1.0);
        let b = Tensor::filled(&[5, 2], 0.5);
        assert_eq!(recon_error(&a, &b).unwrap(), 0.5);
        assert!(recon_error(&a, &Tensor::filled(&[3, 3], 0.0)).is_err());
    }
}
