//! Geometry of the penultimate layer: class templates (final-layer weight
//! rows), distances between normalized templates, average distance from a
//! template or cluster centroid to a class's representations, and a 2D
//! projection onto the plane through three templates.
//!
//! Every distance is computed between unit-normalized vectors. The final
//! layer's bias is not part of a template.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{dot, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub vectors: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub split: Split,
}

impl RepresentationSet {
    fn of_class(&self, class: usize) -> impl Iterator<Item = &Vec<f64>> {
        self.vectors
            .iter()
            .zip(&self.classes)
            .filter(move |(_, &c)| c == class)
            .map(|(v, _)| v)
    }

    /// Unit-normalized vectors of `class`; zero vectors stay zero.
    fn normalized_class(&self, class: usize) -> Result<Vec<Vec<f64>>> {
        let out: Vec<Vec<f64>> = self.of_class(class).map(|v| normalize_or_zero(v)).collect();
        if out.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Vec<f64>>) -> Result<Self> {
        let normalized = templates
            .iter()
            .enumerate()
            .map(|(c, t)| {
                normalize(t).ok_or_else(|| Error::Degenerate(format!("template of class {c} has zero norm")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            templates,
            normalized,
        })
    }

    pub fn from_network(net: &Network) -> Result<Self> {
        let last = net.final_layer();
        Self::new((0..last.outputs).map(|r| last.row(r).to_vec()).collect())
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Norms within this distance of one are treated as already unit.
const UNIT_SLACK: f64 = 1e-12;

/// `v / ||v||`, or `None` for a zero (or non-finite) norm. Vectors already of
/// unit norm come back unchanged, so normalizing twice equals normalizing once.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    if (n - 1.0).abs() <= UNIT_SLACK {
        Some(v.to_vec())
    } else if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

fn normalize_or_zero(v: &[f64]) -> Vec<f64> {
    normalize(v).unwrap_or_else(|| vec![0.0; v.len()])
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Penultimate activations of every sample in `split`, ascending index order.
pub fn extract_representations(net: &Network, dataset: &Dataset, split: Split) -> Result<RepresentationSet> {
    let idx = dataset.indices(split);
    let vectors = idx
        .iter()
        .map(|&i| net.penultimate(dataset.sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepresentationSet {
        vectors,
        classes: idx.iter().map(|&i| dataset.label(i)).collect(),
        split,
    })
}

/// Pairwise distances between normalized templates.
pub fn template_distances(templates: &TemplateSet) -> Vec<Vec<f64>> {
    let t = &templates.normalized;
    let c = t.len();
    let mut d = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let v = euclidean(&t[i], &t[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean of the off-diagonal template distances.
pub fn mean_template_distance(distances: &[Vec<f64>]) -> f64 {
    let c = distances.len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            sum += distances[i][j];
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Mean distance from the normalized template of `from` to the normalized
/// representations of class `to`.
pub fn avg_dist_to_template(reps: &RepresentationSet, templates: &TemplateSet, from: usize, to: usize) -> Result<f64> {
    let t = templates
        .normalized
        .get(from)
        .ok_or_else(|| Error::invalid(format!("no template for class {from}")))?;
    let cluster = reps.normalized_class(to)?;
    Ok(cluster.iter().map(|r| euclidean(t, r)).sum::<f64>() / cluster.len() as f64)
}

/// Mean distance from the centroid of class `from`'s normalized
/// representations to the normalized representations of class `to`.
pub fn avg_dist_to_centroid(reps: &RepresentationSet, from: usize, to: usize) -> Result<f64> {
    let source = reps.normalized_class(from)?;
    let mut centroid = vec![0.0; source[0].len()];
    for v in &source {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    let n = source.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let cluster = reps.normalized_class(to)?;
    Ok(cluster.iter().map(|r| euclidean(&centroid, r)).sum::<f64>() / cluster.len() as f64)
}

/// Orthonormal frame of the plane through three points.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Plane {
    pub fn through(a: &[f64], b: &[f64], c: &[f64]) -> Result<Self> {
        let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        let ac: Vec<f64> = c.iter().zip(a).map(|(x, y)| x - y).collect();
        let scale = norm(&ab).max(norm(&ac));
        let u = normalize(&ab).ok_or_else(|| Error::Degenerate("first two templates coincide".into()))?;
        let along = dot(&ac, &u);
        let perp: Vec<f64> = ac.iter().zip(&u).map(|(x, y)| x - along * y).collect();
        if norm(&perp) <= 1e-10 * scale {
            return Err(Error::Degenerate("templates are collinear".into()));
        }
        let v = normalize(&perp).expect("nonzero");
        Ok(Self {
            origin: a.to_vec(),
            u,
            v,
        })
    }

    pub fn coords(&self, x: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = x.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        (dot(&d, &self.u), dot(&d, &self.v))
    }

    /// Distance from `x` to the plane.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let (s, t) = self.coords(x);
        let r: Vec<f64> = x
            .iter()
            .zip(&self.origin)
            .zip(self.u.iter().zip(&self.v))
            .map(|((xi, oi), (ui, vi))| xi - oi - s * ui - t * vi)
            .collect();
        norm(&r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Sample,
    Template,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub kind: PointKind,
    pub class: usize,
    pub u: f64,
    pub v: f64,
}

/// Project the three classes' normalized representations and their
/// normalized templates onto the plane through those templates.
pub fn project_template_plane(
    reps: &RepresentationSet,
    templates: &TemplateSet,
    classes: [usize; 3],
) -> Result<Vec<ProjectedPoint>> {
    let [a, b, c] = classes;
    if a == b || b == c || a == c {
        return Err(Error::invalid(format!("projection needs 3 distinct classes, got {classes:?}")));
    }
    let t = |k: usize| {
        templates
            .normalized
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no template for class {k}")))
    };
    let plane = Plane::through(t(a)?, t(b)?, t(c)?)?;
    let mut points = Vec::new();
    for (v, &k) in reps.vectors.iter().zip(&reps.classes) {
        if classes.contains(&k) {
            let (u, w) = plane.coords(&normalize_or_zero(v));
            points.push(ProjectedPoint {
                kind: PointKind::Sample,
                class: k,
                u,
                v: w,
            });
        }
    }
    for k in classes {
        let (u, w) = plane.coords(t(k)?);
        points.push(ProjectedPoint {
            kind: PointKind::Template,
            class: k,
            u,
            v: w,
        });
    }
    Ok(points)
}

fn header(provenance: &[String]) -> String {
    provenance.iter().map(|l| format!("# {l}\n")).collect()
}

pub fn template_distances_csv(distances: &[Vec<f64>], method: &str, provenance: &[String]) -> String {
    let mut out = header(provenance);
    out.push_str("pair,method,distance\n");
    for i in 0..distances.len() {
        for j in i + 1..distances.len() {
            let _ = writeln!(out, "{i}-{j},{method},{}", distances[i][j]);
        }
    }
    out
}

pub fn class_matrix_csv(values: &[Vec<f64>], provenance: &[String]) -> String {
    let mut out = header(provenance);
    out.push_str("from_class,to_class,value\n");
    for (a, row) in values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{a},{b},{v}");
        }
    }
    out
}

pub fn projection_csv(points: &[ProjectedPoint], provenance: &[String]) -> String {
    let mut out = header(provenance);
    out.push_str("kind,class,u,v\n");
    for p in points {
        let kind = match p.kind {
            PointKind::Sample => "sample",
            PointKind::Template => "template",
        };
        let _ = writeln!(out, "{kind},{},{},{}", p.class, p.u, p.v);
    }
    out
}

/// Everything the analysis exports for one trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub distances: Vec<Vec<f64>>,
    /// `adt[a][b]`: template `a` to class `b` (train split).
    pub adt: Vec<Vec<f64>>,
    /// `adc[a][b]`: centroid of class `a` to class `b` (train split).
    pub adc: Vec<Vec<f64>>,
    /// Train and test projections, when three classes were available.
    pub projections: Option<(Vec<ProjectedPoint>, Vec<ProjectedPoint>)>,
}

pub fn analyze(net: &Network, dataset: &Dataset, projection: Option<[usize; 3]>) -> Result<AnalysisReport> {
    let templates = TemplateSet::from_network(net)?;
    let train = extract_representations(net, dataset, Split::Train)?;
    let c = templates.len();
    let mut adt = vec![vec![0.0; c]; c];
    let mut adc = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            adt[a][b] = avg_dist_to_template(&train, &templates, a, b)?;
            adc[a][b] = avg_dist_to_centroid(&train, a, b)?;
        }
    }
    let projections = match projection {
        Some(classes) => {
            let test = extract_representations(net, dataset, Split::Test)?;
            Some((
                project_template_plane(&train, &templates, classes)?,
                project_template_plane(&test, &templates, classes)?,
            ))
        }
        None => None,
    };
    Ok(AnalysisReport {
        distances: template_distances(&templates),
        adt,
        adc,
        projections,
    })
}

impl AnalysisReport {
    pub fn write_dir(&self, dir: &Path, method: &str, provenance: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::file(p, e))
        };
        write("template_distances.csv", template_distances_csv(&self.distances, method, provenance))?;
        write("adt.csv", class_matrix_csv(&self.adt, provenance))?;
        write("adc.csv", class_matrix_csv(&self.adc, provenance))?;
        if let Some((train, test)) = &self.projections {
            write("projection_train.csv", projection_csv(train, provenance))?;
            write("projection_test.csv", projection_csv(test, provenance))?;
        }
        Ok(())
    }
}
