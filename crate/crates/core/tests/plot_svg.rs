use sgmoe_core::experiments::{fit_loglog, SweepRecord};
use sgmoe_core::plot::{
    render_loglog_svg, write_loglog_svg, Canvas, LogLogFrame, PlotSeries, FIT_ORANGE, SIGMOID_BLUE,
    SOFTMAX_RED,
};
use sgmoe_core::GateKind;

fn records(gate: GateKind, ns: &[usize], c: f64, slope: f64, spread: f64) -> Vec<SweepRecord> {
    let mut out = Vec::new();
    for &n in ns {
        for rep in 0..3 {
            let wiggle = 1.0 + spread * (rep as f64 - 1.0);
            out.push(SweepRecord {
                gate,
                k_fit: 3,
                n,
                replication: rep,
                seed: rep as u64,
                loss_name: "L".into(),
                loss_value: c * (n as f64).powf(slope) * wiggle,
                em_iterations: 5,
                final_loglik: -1.0,
                converged: true,
                wall_ms: 0,
            });
        }
    }
    out
}

fn attr(node: roxmltree::Node<'_, '_>, name: &str) -> f64 {
    node.attribute(name).unwrap().parse().unwrap()
}

fn with_class<'a, 'i>(
    doc: &'a roxmltree::Document<'i>,
    tag: &str,
    class: &str,
) -> Vec<roxmltree::Node<'a, 'i>> {
    doc.descendants()
        .filter(|n| n.has_tag_name(tag) && n.attribute("class") == Some(class))
        .collect()
}

#[test]
fn markers_lie_on_an_exact_power_law_fit() {
    let ns = [1000, 2000, 4000, 8000, 16000];
    let fit = fit_loglog(&records(GateKind::ModifiedSigmoid, &ns, 3.0, -0.5, 0.0)).unwrap();
    assert!((fit.slope + 0.5).abs() < 1e-12);
    let series = [PlotSeries::for_fit(&fit)];
    let svg = render_loglog_svg(&series, "exact", Canvas::default()).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();

    let markers = with_class(&doc, "circle", "marker");
    assert_eq!(markers.len(), ns.len());
    let line = with_class(&doc, "line", "fit");
    assert_eq!(line.len(), 1);
    let line = line[0];
    assert_eq!(line.attribute("stroke"), Some(FIT_ORANGE));
    assert!(line.attribute("stroke-dasharray").is_some());
    let (x1, y1, x2, y2) = (
        attr(line, "x1"),
        attr(line, "y1"),
        attr(line, "x2"),
        attr(line, "y2"),
    );
    for m in &markers {
        assert_eq!(m.attribute("fill"), Some(SIGMOID_BLUE));
        let (cx, cy) = (attr(*m, "cx"), attr(*m, "cy"));
        let on_line = y1 + (y2 - y1) * (cx - x1) / (x2 - x1);
        assert!(
            (cy - on_line).abs() < 0.5,
            "marker at ({cx}, {cy}) is off the fit line ({on_line})"
        );
    }
    // The fit line spans the first to the last marker.
    let xs: Vec<f64> = markers.iter().map(|m| attr(*m, "cx")).collect();
    assert!((x1 - xs[0]).abs() < 1e-3 && (x2 - xs[xs.len() - 1]).abs() < 1e-3);

    let slope = with_class(&doc, "text", "slope");
    assert_eq!(slope.len(), 1);
    assert!(slope[0].text().unwrap().ends_with("slope -0.50"));
}

#[test]
fn markers_map_through_the_frame() {
    let ns = [100, 1000, 10000];
    let fit = fit_loglog(&records(GateKind::ModifiedSigmoid, &ns, 1.0, -1.0, 0.2)).unwrap();
    let series = [PlotSeries::for_fit(&fit)];
    let canvas = Canvas::default();
    let frame = LogLogFrame::fitting(&series, canvas).unwrap();
    let svg = render_loglog_svg(&series, "frame", canvas).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    for (m, (&n, &mean)) in with_class(&doc, "circle", "marker")
        .iter()
        .zip(fit.n_values.iter().zip(&fit.per_n_mean))
    {
        assert!((attr(*m, "cx") - frame.x_px(n as f64)).abs() < 1e-3);
        assert!((attr(*m, "cy") - frame.y_px(mean)).abs() < 1e-3);
    }
    assert_eq!(with_class(&doc, "line", "errorbar").len(), ns.len());
    assert_eq!(with_class(&doc, "line", "errorcap").len(), 2 * ns.len());
}

#[test]
fn overlay_uses_gate_colors() {
    let ns = [1000, 3000, 10000];
    let a = fit_loglog(&records(GateKind::ModifiedSigmoid, &ns, 1.0, -0.5, 0.1)).unwrap();
    let b = fit_loglog(&records(GateKind::SoftmaxBaseline, &ns, 1.0, -0.3, 0.1)).unwrap();
    let series = [PlotSeries::for_fit(&a), PlotSeries::for_fit(&b)];
    let svg = render_loglog_svg(&series, "overlay", Canvas::default()).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let fills: Vec<&str> = with_class(&doc, "circle", "marker")
        .iter()
        .map(|m| m.attribute("fill").unwrap())
        .collect();
    assert_eq!(fills.iter().filter(|f| **f == SIGMOID_BLUE).count(), 3);
    assert_eq!(fills.iter().filter(|f| **f == SOFTMAX_RED).count(), 3);
    assert_eq!(with_class(&doc, "line", "fit").len(), 2);
    assert_eq!(with_class(&doc, "g", "series").len(), 2);
}

#[test]
fn failed_render_writes_nothing() {
    let a = fit_loglog(&records(
        GateKind::ModifiedSigmoid,
        &[10, 20],
        1.0,
        -0.5,
        0.0,
    ))
    .unwrap();
    let b = fit_loglog(&records(
        GateKind::SoftmaxBaseline,
        &[1000, 2000],
        1.0,
        -0.5,
        0.0,
    ))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.svg");
    let series = [PlotSeries::for_fit(&a), PlotSeries::for_fit(&b)];
    assert!(write_loglog_svg(&series, "disjoint", &path).is_err());
    assert!(!path.exists());
    assert!(write_loglog_svg(&[], "empty", &path).is_err());
    assert!(!path.exists());
}
