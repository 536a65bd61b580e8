//! Profiler reports rendered as an aligned table, CSV or JSON.
//!
//! All three renderings carry the same exact integer counts; the rounded
//! GMAC/M-param columns, the 3D share and the reduction factors are formatted
//! once here and reused by every renderer.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{FixedCost, LayerKind, Stage};
use crate::conv::VariantKind;
use crate::cost::{gmacs, mparams, reduction_report, NetworkCost, Ratio, Totals};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::validation(format!("unknown format `{s}` (expected table, csv or json)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub id: String,
    pub kind: LayerKind,
    pub variant: VariantKind,
    pub input: String,
    pub output: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RatioOut {
    pub num: u64,
    pub den: u64,
    /// One decimal, rounded half up.
    pub factor: String,
}

impl From<Ratio> for RatioOut {
    fn from(r: Ratio) -> Self {
        let t = r.tenths();
        Self { num: r.num, den: r.den, factor: format!("{}.{}", t / 10, t % 10) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BaselineOut {
    pub variant: String,
    pub three_d: Totals,
    pub ops_reduction: RatioOut,
    pub params_reduction: RatioOut,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProfileReport {
    pub network: String,
    /// Variant applied to the conv3d layers, or `mixed`.
    pub variant: String,
    pub layers: Vec<LayerRow>,
    pub fixed: Vec<FixedCost>,
    /// Modeled layers only.
    pub layers_total: Totals,
    /// Layers plus fixed costs tagged `3d`.
    pub three_d: Totals,
    pub network_total: Totals,
    /// 3D share of network MACs in percent, one decimal.
    pub share_3d_pct: String,
    pub baseline: Option<BaselineOut>,
}

fn conv_variant(cost: &NetworkCost) -> String {
    let mut vs = cost.layers.iter().filter(|l| l.kind == LayerKind::Conv3d).map(|l| l.variant);
    match vs.next() {
        Some(first) if vs.all(|v| v == first) => first.name().to_lowercase(),
        Some(_) => "mixed".into(),
        None => "full".into(),
    }
}

/// Percentage with one decimal, rounded half up, from an exact fraction.
fn percent1(num: u64, den: u64) -> String {
    if den == 0 {
        return "0.0".into();
    }
    let (n, d) = (num as u128, den as u128);
    let tenths = (2000 * n + d) / (2 * d);
    format!("{}.{}", tenths / 10, tenths % 10)
}

impl ProfileReport {
    pub fn new(cost: &NetworkCost, baseline: Option<&NetworkCost>) -> Result<Self> {
        let layers: Vec<LayerRow> = cost
            .layers
            .iter()
            .map(|l| LayerRow {
                id: l.id.clone(),
                kind: l.kind,
                variant: l.variant,
                input: l.input.clone(),
                output: l.output.clone(),
                params: l.cost.total_params(),
                macs: l.cost.total_macs(),
            })
            .collect();
        let layers_total = Totals {
            params: layers.iter().map(|r| r.params).sum(),
            macs: layers.iter().map(|r| r.macs).sum(),
        };
        ensure!(
            layers_total == Totals { params: cost.conv.total_params(), macs: cost.conv.total_macs() },
            "layer rows do not sum to the network count"
        );
        let three_d = cost.three_d();
        let network_total = cost.total();
        let baseline = match baseline {
            None => None,
            Some(b) => {
                let r = reduction_report(b, cost)?;
                Some(BaselineOut {
                    variant: conv_variant(b),
                    three_d: b.three_d(),
                    ops_reduction: r.ops.into(),
                    params_reduction: r.params.into(),
                })
            }
        };
        Ok(Self {
            network: cost.name.clone(),
            variant: conv_variant(cost),
            layers,
            fixed: cost.fixed.clone(),
            layers_total,
            three_d,
            network_total,
            share_3d_pct: percent1(three_d.macs, network_total.macs),
            baseline,
        })
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.table(),
            Format::Csv => self.csv(),
            Format::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
        }
    }

    /// Rows shared by the table and CSV renderers:
    /// `(section, id, kind, variant, input, output, params, macs, value)`.
    fn rows(&self) -> Vec<[String; 9]> {
        let mut rows = Vec::new();
        for l in &self.layers {
            rows.push([
                "layer".into(),
                l.id.clone(),
                l.kind.to_string(),
                l.variant.name().to_lowercase(),
                l.input.clone(),
                l.output.clone(),
                l.params.to_string(),
                l.macs.to_string(),
                String::new(),
            ]);
        }
        for f in &self.fixed {
            rows.push([
                "fixed".into(),
                f.name.clone(),
                f.stage.to_string(),
                String::new(),
                String::new(),
                String::new(),
                f.params.to_string(),
                f.macs.to_string(),
                String::new(),
            ]);
        }
        let total = |id: &str, t: Totals, variant: &str| {
            [
                "total".into(),
                id.to_string(),
                String::new(),
                variant.to_string(),
                String::new(),
                String::new(),
                t.params.to_string(),
                t.macs.to_string(),
                String::new(),
            ]
        };
        rows.push(total("layers", self.layers_total, &self.variant));
        rows.push(total(Stage::ThreeD.to_string().as_str(), self.three_d, &self.variant));
        rows.push(total("network", self.network_total, &self.variant));
        let value = |section: &str, id: &str, v: &str| {
            let mut r: [String; 9] = Default::default();
            r[0] = section.into();
            r[1] = id.into();
            r[8] = v.into();
            r
        };
        rows.push(value("share", "3d-macs-pct", &self.share_3d_pct));
        if let Some(b) = &self.baseline {
            rows.push(total("baseline-3d", b.three_d, &b.variant));
            rows.push(value("reduction", "ops", &b.ops_reduction.factor));
            rows.push(value("reduction", "params", &b.params_reduction.factor));
        }
        rows
    }

    fn csv(&self) -> String {
        let mut out = String::from("section,id,kind,variant,input,output,params,macs,mparams,gmacs,value\n");
        for r in self.rows() {
            let (mp, gm) = if r[6].is_empty() {
                (String::new(), String::new())
            } else {
                (mparams(r[6].parse().expect("integer")), gmacs(r[7].parse().expect("integer")))
            };
            let cells = [&r[0], &r[1], &r[2], &r[3], &r[4], &r[5], &r[6], &r[7], &mp, &gm, &r[8]];
            let line: Vec<String> = cells.iter().map(|c| csv_cell(c)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "network {}  variant {}", self.network, self.variant);
        let head = ["id", "kind", "variant", "input", "output", "params", "MACs", "M params", "GMACs"];
        let mut body: Vec<Vec<String>> = Vec::new();
        for r in self.rows().into_iter().filter(|r| r[0] != "share" && r[0] != "reduction") {
            let (mp, gm) = (mparams(r[6].parse().expect("integer")), gmacs(r[7].parse().expect("integer")));
            let id = match r[0].as_str() {
                "layer" => r[1].clone(),
                s => format!("[{s}] {}", r[1]),
            };
            body.push(vec![id, r[2].clone(), r[3].clone(), r[4].clone(), r[5].clone(), r[6].clone(), r[7].clone(), mp, gm]);
        }
        let widths: Vec<usize> =
            (0..head.len()).map(|i| body.iter().map(|r| r[i].len()).chain([head[i].len()]).max().unwrap_or(0)).collect();
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| if i >= 5 { format!("{c:>w$}", w = widths[i]) } else { format!("{c:<w$}", w = widths[i]) })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let _ = writeln!(out, "{}", line(&head.map(String::from)));
        for r in &body {
            let _ = writeln!(out, "{}", line(r));
        }
        let _ = writeln!(out, "3D share of network MACs: {}%", self.share_3d_pct);
        if let Some(b) = &self.baseline {
            let _ = writeln!(
                out,
                "reduction vs {}: ops {}x, params {}x",
                b.variant, b.ops_reduction.factor, b.params_reduction.factor
            );
        }
        out
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::cost::count_network;

    const CFG: &str = r#"{
      "name": "tiny",
      "input": {"channels": 4, "disparity": 8, "height": 8, "width": 8},
      "layers": [
        {"id": "a", "kind": "conv3d", "variant": "full", "k": 3, "stride": 1, "out_channels": 8, "bias": false, "bn": true},
        {"id": "b", "kind": "conv3d", "variant": "full", "k": 3, "stride": 2, "out_channels": 8, "bias": false, "bn": true}
      ],
      "fixed_costs": [{"name": "backbone", "stage": "2d", "params": 1000, "macs": 3000000}]
    }"#;

    fn reports() -> (ProfileReport, ProfileReport) {
        let cfg = parse_config(CFG).unwrap();
        let base = count_network(&cfg).unwrap();
        let fw = count_network(&cfg.substitute_variant(VariantKind::FwSC).unwrap()).unwrap();
        (ProfileReport::new(&base, None).unwrap(), ProfileReport::new(&fw, Some(&base)).unwrap())
    }

    #[test]
    fn totals_and_reductions() {
        let (base, fw) = reports();
        assert_eq!(base.network_total.macs, base.three_d.macs + 3_000_000);
        let b = fw.baseline.as_ref().unwrap();
        assert_eq!(b.three_d, base.three_d);
        assert_eq!((b.ops_reduction.num, b.ops_reduction.den), (base.three_d.macs, fw.three_d.macs));
        assert_eq!(fw.variant, "fwsc");
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let (_, fw) = reports();
        let csv = fw.render(Format::Csv);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "section,id,kind,variant,input,output,params,macs,mparams,gmacs,value");
        assert!(lines.all(|l| l.split(',').count() == 11));
        assert!(csv.contains(&format!("reduction,ops,,,,,,,,,{}", fw.baseline.unwrap().ops_reduction.factor)));
    }

    #[test]
    fn table_mentions_every_total() {
        let (_, fw) = reports();
        let t = fw.render(Format::Table);
        for n in [fw.three_d.macs, fw.network_total.macs, fw.layers_total.params] {
            assert!(t.contains(&n.to_string()));
        }
        assert!(t.contains(&format!("{}%", fw.share_3d_pct)));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent1(919, 1000), "91.9");
        assert_eq!(percent1(9195, 10000), "92.0");
        assert_eq!(percent1(1, 3), "33.3");
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert!("xml".parse::<Format>().is_err());
    }
}
