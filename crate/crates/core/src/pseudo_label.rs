//! LiDAR pseudo-labels: density clustering per frame, size and shape gates,
//! greedy frame-to-frame association and per-frame label emission.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, timestamp: f64) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points, timestamp })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Indices into the source cloud, ascending.
    pub members: Vec<usize>,
    pub centroid: [f64; 3],
    /// Axis-aligned bounding box side lengths.
    pub extent: [f64; 3],
}

impl Cluster {
    fn from_members(points: &[[f64; 3]], members: Vec<usize>) -> Self {
        let n = members.len() as f64;
        let mut centroid = [0.0; 3];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &members {
            for a in 0..3 {
                centroid[a] += points[i][a] / n;
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        Cluster {
            extent: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
            centroid,
            members,
        }
    }

    pub fn point_count(&self) -> usize {
        self.members.len()
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform grid with `eps`-sized cells for radius queries.
struct Grid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Indices within `eps` of `p`, including `p` itself, ascending.
    fn neighbours(&self, points: &[[f64; 3]], p: &[f64; 3], eps2: f64, out: &mut Vec<usize>) {
        out.clear();
        let k = Self::key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(ids.iter().copied().filter(|&j| dist2(p, &points[j]) <= eps2));
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Density clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Clusters are the connected components
/// of core points; a non-core point within `eps` of some core point joins the
/// cluster of its nearest core point, ties going to the lowest coordinates.
/// Everything else is noise. Clusters are ordered by their smallest member.
pub fn dbscan(cloud: &PointCloud, eps: f64, min_pts: usize) -> Result<Vec<Cluster>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Config(format!("dbscan needs eps > 0 and minPts >= 1, got {eps}, {min_pts}")));
    }
    let pts = &cloud.points;
    let n = pts.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let eps2 = eps * eps;
    let grid = Grid::new(pts, eps);
    let mut neigh: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for p in pts {
        grid.neighbours(pts, p, eps2, &mut buf);
        neigh.push(buf.clone());
    }
    let core: Vec<bool> = neigh.iter().map(|nb| nb.len() >= min_pts).collect();

    const UNSET: usize = usize::MAX;
    let mut label = vec![UNSET; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || label[start] != UNSET {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for &j in &neigh[i] {
                if core[j] && label[j] == UNSET {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let best = neigh[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                dist2(&pts[i], &pts[a])
                    .total_cmp(&dist2(&pts[i], &pts[b]))
                    .then_with(|| pts[a].partial_cmp(&pts[b]).unwrap_or(std::cmp::Ordering::Equal))
            });
        if let Some(j) = best {
            label[i] = label[j];
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); next];
    for (i, &l) in label.iter().enumerate() {
        if l != UNSET {
            members[l].push(i);
        }
    }
    let mut clusters: Vec<Cluster> = members
        .into_iter()
        .map(|m| Cluster::from_members(pts, m))
        .collect();
    clusters.sort_by_key(|c| c.members[0]);
    Ok(clusters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Neighbourhood radius (m).
    pub eps: f64,
    pub min_pts: usize,
    pub c_min: usize,
    pub c_max: usize,
    /// Maximum bounding-box side (m).
    pub e_max: f64,
    /// Maximum centroid displacement between consecutive frames (m).
    pub d_max: f64,
    /// Minimum track length in consecutive frames.
    pub m_min: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            eps: 0.7,
            min_pts: 4,
            c_min: 3,
            c_max: 400,
            e_max: 1.5,
            d_max: 2.0,
            m_min: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    TooFewPoints,
    TooManyPoints,
    TooLarge,
    ShortTrack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub frame: usize,
    /// Index into that frame's input cluster list.
    pub cluster: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTrack {
    pub id: usize,
    pub frames: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub centroids: Vec<[f64; 3]>,
    /// Centroid displacement from the previous frame; empty for the first.
    pub displacements: Vec<f64>,
    /// Index of the matched cluster in each frame.
    cluster_idx: Vec<usize>,
}

impl PseudoTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    /// Surviving clusters per frame, a subset of the input in input order.
    pub kept: Vec<Vec<Cluster>>,
    pub tracks: Vec<PseudoTrack>,
    pub rejections: Vec<Rejection>,
}

fn shape_check(c: &Cluster, cfg: &LabelConfig) -> Option<RejectReason> {
    if c.point_count() < cfg.c_min {
        Some(RejectReason::TooFewPoints)
    } else if c.point_count() > cfg.c_max {
        Some(RejectReason::TooManyPoints)
    } else if c.extent.iter().any(|&e| e > cfg.e_max) {
        Some(RejectReason::TooLarge)
    } else {
        None
    }
}

/// Applies the size and shape gates, then keeps clusters that belong to a
/// track of at least `m_min` consecutive frames with steps of at most `d_max`.
/// `timestamps[f]` is the time of frame `f` and must strictly increase.
pub fn filter_clusters(frames: &[Vec<Cluster>], timestamps: &[f64], cfg: &LabelConfig) -> Result<FilterOutcome> {
    if frames.len() != timestamps.len() {
        return Err(Error::Dimension(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("frame timestamps must strictly increase".into()));
    }
    let mut rejections = Vec::new();
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    for (f, clusters) in frames.iter().enumerate() {
        let mut ok = Vec::new();
        for (i, c) in clusters.iter().enumerate() {
            match shape_check(c, cfg) {
                Some(reason) => {
                    log::debug!("frame {f} cluster {i} rejected: {reason:?}");
                    rejections.push(Rejection {
                        frame: f,
                        cluster: i,
                        reason,
                    });
                }
                None => ok.push(i),
            }
        }
        candidates.push(ok);
    }

    let mut tracks: Vec<PseudoTrack> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let d2max = cfg.d_max * cfg.d_max;
    for (f, cand) in candidates.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &t in &active {
            let last = *tracks[t].centroids.last().expect("nonempty track");
            for &c in cand {
                let d2 = dist2(&last, &frames[f][c].centroid);
                if d2 <= d2max {
                    pairs.push((d2, t, c));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut cluster_used = HashMap::new();
        let mut next_active = Vec::new();
        for (d2, t, c) in pairs {
            if track_used[t] || cluster_used.contains_key(&c) {
                continue;
            }
            track_used[t] = true;
            cluster_used.insert(c, t);
            let tr = &mut tracks[t];
            tr.frames.push(f);
            tr.timestamps.push(timestamps[f]);
            tr.centroids.push(frames[f][c].centroid);
            tr.displacements.push(d2.sqrt());
            tr.cluster_idx.push(c);
            next_active.push(t);
        }
        for &c in cand {
            if !cluster_used.contains_key(&c) {
                let id = tracks.len();
                tracks.push(PseudoTrack {
                    id,
                    frames: vec![f],
                    timestamps: vec![timestamps[f]],
                    centroids: vec![frames[f][c].centroid],
                    displacements: Vec::new(),
                    cluster_idx: vec![c],
                });
                next_active.push(id);
            }
        }
        next_active.sort_unstable();
        active = next_active;
    }

    let mut keep: Vec<Vec<bool>> = frames.iter().map(|c| vec![false; c.len()]).collect();
    let mut retained = Vec::new();
    for tr in tracks {
        if tr.len() >= cfg.m_min {
            for (&f, &c) in tr.frames.iter().zip(&tr.cluster_idx) {
                keep[f][c] = true;
            }
            retained.push(tr);
        } else {
            for (&f, &c) in tr.frames.iter().zip(&tr.cluster_idx) {
                rejections.push(Rejection {
                    frame: f,
                    cluster: c,
                    reason: RejectReason::ShortTrack,
                });
            }
        }
    }
    for (i, tr) in retained.iter_mut().enumerate() {
        tr.id = i;
    }
    rejections.sort_by_key(|r| (r.frame, r.cluster));
    let kept = frames
        .iter()
        .zip(&keep)
        .map(|(cs, k)| cs.iter().zip(k).filter(|(_, &k)| k).map(|(c, _)| c.clone()).collect())
        .collect();
    Ok(FilterOutcome {
        kept,
        tracks: retained,
        rejections,
    })
}

/// One pseudo-label record. Class is never assigned from LiDAR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLabel {
    pub scene: usize,
    pub frame: usize,
    pub timestamp: f64,
    pub track_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TrajectoryLabel {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// One label per frame per track, ordered by timestamp then track.
pub fn emit_labels(scene: usize, tracks: &[PseudoTrack]) -> Vec<TrajectoryLabel> {
    let mut out: Vec<TrajectoryLabel> = tracks
        .iter()
        .flat_map(|t| {
            t.frames.iter().zip(&t.timestamps).zip(&t.centroids).map(move |((&f, &ts), c)| TrajectoryLabel {
                scene,
                frame: f,
                timestamp: ts,
                track_id: t.id,
                x: c[0],
                y: c[1],
                z: c[2],
            })
        })
        .collect();
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.track_id.cmp(&b.track_id)));
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceLabels {
    pub labels: Vec<TrajectoryLabel>,
    pub outcome: FilterOutcome,
}

/// Clusters every frame (in parallel), filters and emits labels.
pub fn label_sequence(scene: usize, clouds: &[PointCloud], cfg: &LabelConfig) -> Result<SequenceLabels> {
    let clusters: Vec<Vec<Cluster>> = clouds
        .par_iter()
        .map(|c| dbscan(c, cfg.eps, cfg.min_pts))
        .collect::<Result<_>>()?;
    let ts: Vec<f64> = clouds.iter().map(|c| c.timestamp).collect();
    let outcome = filter_clusters(&clusters, &ts, cfg)?;
    Ok(SequenceLabels {
        labels: emit_labels(scene, &outcome.tracks),
        outcome,
    })
}

/// For each frame, the label of the longest track covering it.
pub fn primary_labels(labels: &[TrajectoryLabel]) -> HashMap<(usize, usize), TrajectoryLabel> {
    let mut len: HashMap<(usize, usize), usize> = HashMap::new();
    for l in labels {
        *len.entry((l.scene, l.track_id)).or_default() += 1;
    }
    let mut best: HashMap<(usize, usize), TrajectoryLabel> = HashMap::new();
    for l in labels {
        let key = (l.scene, l.frame);
        let better = match best.get(&key) {
            None => true,
            Some(b) => {
                let (lb, ll) = (len[&(b.scene, b.track_id)], len[&(l.scene, l.track_id)]);
                ll > lb || (ll == lb && l.track_id < b.track_id)
            }
        };
        if better {
            best.insert(key, l.clone());
        }
    }
    best
}

pub fn write_labels(path: &Path, labels: &[TrajectoryLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for l in labels {
        w.serialize(l).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<TrajectoryLabel>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|rec| rec.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, c: [f64; 3], n: usize, r: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [c[0] + rng.gen_range(-r..r), c[1] + rng.gen_range(-r..r), c[2] + rng.gen_range(-r..r)])
            .collect()
    }

    fn cluster_at(c: [f64; 3], n: usize, extent: f64) -> Cluster {
        Cluster {
            members: (0..n).collect(),
            centroid: c,
            extent: [extent; 3],
        }
    }

    #[test]
    fn empty_cloud_gives_no_clusters() {
        let c = PointCloud::new(vec![], 0.0).unwrap();
        assert!(dbscan(&c, 0.5, 3).unwrap().is_empty());
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(&mut rng, [0.0; 3], 20, 0.2);
        pts.extend(blob(&mut rng, [10.0, 0.0, 0.0], 20, 0.2));
        let cs = dbscan(&PointCloud::new(pts, 0.0).unwrap(), 0.5, 5).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].members, (0..20).collect::<Vec<_>>());
        assert_eq!(cs[1].members, (20..40).collect::<Vec<_>>());
    }

    #[test]
    fn fully_dense_cloud_is_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = blob(&mut rng, [1.0, 2.0, 3.0], 12, 0.1);
        let cs = dbscan(&PointCloud::new(pts, 0.0).unwrap(), 1.0, 12).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].point_count(), 12);
    }

    #[test]
    fn wall_and_one_frame_blips_are_rejected() {
        let cfg = LabelConfig::default();
        let wall = Cluster {
            extent: [5.0, 0.2, 3.0],
            ..cluster_at([0.0, 5.0, 1.0], 200, 0.0)
        };
        let mut frames = vec![vec![wall.clone()], vec![wall.clone()], vec![wall]];
        frames[1].push(cluster_at([3.0, 3.0, 3.0], 10, 0.3));
        let out = filter_clusters(&frames, &[0.0, 0.1, 0.2], &cfg).unwrap();
        assert!(out.kept.iter().all(Vec::is_empty));
        assert!(out.tracks.is_empty());
        let reasons: Vec<_> = out.rejections.iter().map(|r| r.reason).collect();
        assert_eq!(reasons.iter().filter(|&&r| r == RejectReason::TooLarge).count(), 3);
        assert_eq!(reasons.iter().filter(|&&r| r == RejectReason::ShortTrack).count(), 1);
    }

    #[test]
    fn smooth_track_is_kept_and_emitted_in_order() {
        let cfg = LabelConfig::default();
        let frames: Vec<Vec<Cluster>> = (0..10)
            .map(|f| vec![cluster_at([f as f64 * 0.3, 4.0, 5.0], 20, 0.4)])
            .collect();
        let ts: Vec<f64> = (0..10).map(|f| f as f64 * 0.5).collect();
        let out = filter_clusters(&frames, &ts, &cfg).unwrap();
        assert_eq!(out.tracks.len(), 1);
        assert!(out.tracks[0].displacements.iter().all(|&d| d <= cfg.d_max));
        let labels = emit_labels(3, &out.tracks);
        assert_eq!(labels.len(), 10);
        assert!(labels.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
        assert_eq!(labels[4].position(), [4.0 * 0.3, 4.0, 5.0]);
    }

    #[test]
    fn non_increasing_timestamps_are_rejected() {
        let frames = vec![vec![], vec![]];
        assert!(filter_clusters(&frames, &[1.0, 1.0], &LabelConfig::default()).is_err());
    }

    #[test]
    fn labels_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = vec![
            TrajectoryLabel {
                scene: 0,
                frame: 2,
                timestamp: 0.2,
                track_id: 0,
                x: 0.1,
                y: -2.5,
                z: 7.125,
            },
            TrajectoryLabel {
                scene: 1,
                frame: 0,
                timestamp: 1.0 / 3.0,
                track_id: 4,
                x: 1e-9,
                y: 0.0,
                z: 3.0,
            },
        ];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
        assert!(matches!(read_labels(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn primary_label_prefers_the_longest_track() {
        let mk = |frame, track_id, x| TrajectoryLabel {
            scene: 0,
            frame,
            timestamp: frame as f64,
            track_id,
            x,
            y: 0.0,
            z: 0.0,
        };
        let labels = vec![mk(0, 0, 1.0), mk(1, 0, 1.0), mk(1, 1, 9.0), mk(2, 0, 1.0), mk(2, 1, 9.0), mk(3, 1, 9.0), mk(4, 1, 9.0)];
        let p = primary_labels(&labels);
        assert_eq!(p[&(0, 1)].track_id, 1);
        assert_eq!(p[&(0, 0)].track_id, 0);
    }
}
