//! Synthetic spurious-correlation data with `(class, attribute)` groups.
//!
//! Each sample has three feature blocks: a *core* block centred on the class
//! (`−1` / `+1` per coordinate), a *spurious* block centred on the attribute,
//! and pure `N(0, 1)` noise. The spurious block has the smaller noise, so it
//! is the easier signal to pick up. The attribute agrees with the class for
//! exactly `round(rho · n_class)` samples of each class.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Test splits are always drawn with this attribute/class agreement, so all
/// groups are equally represented when measuring worst-group accuracy.
pub const TEST_RHO: f64 = 0.5;

const STREAM_POOL: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldoutValid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::HeldoutValid => "heldout_valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "heldout_valid" => Ok(Split::HeldoutValid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// `g = 2·y + a`.
pub fn group_id(y: usize, a: usize) -> usize {
    2 * y + a
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    x: Tensor,
    y: Vec<usize>,
    a: Vec<usize>,
    g: Vec<usize>,
    split: Vec<Split>,
    num_classes: usize,
}

impl GroupedDataset {
    /// Validates lengths, attribute range and the `g = 2y + a` rule.
    pub fn new(x: Tensor, y: Vec<usize>, a: Vec<usize>, split: Vec<Split>, num_classes: usize) -> Result<Self> {
        let n = x.rows();
        if x.shape().len() != 2 || y.len() != n || a.len() != n || split.len() != n {
            return Err(Error::Dimension(format!(
                "x {:?}, {} labels, {} attributes, {} split tags",
                x.shape(),
                y.len(),
                a.len(),
                split.len()
            )));
        }
        if let Some(i) = y.iter().position(|&v| v >= num_classes) {
            return Err(Error::Validation(format!("row {i}: label {} ≥ {num_classes} classes", y[i])));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!("row {i}: attribute {} is not binary", a[i])));
        }
        let g = y.iter().zip(&a).map(|(&y, &a)| group_id(y, a)).collect();
        Ok(Self {
            x,
            y,
            a,
            g,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn a(&self) -> &[usize] {
        &self.a
    }

    pub fn g(&self) -> &[usize] {
        &self.g
    }

    pub fn split_tags(&self) -> &[Split] {
        &self.split
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        2 * self.num_classes
    }

    /// Sample count per group id, including empty groups.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for &g in &self.g {
            counts[g] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let pick = |v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: pick(&self.y),
            a: pick(&self.a),
            g: pick(&self.g),
            split: idx.iter().map(|&i| self.split[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn with_split(mut self, tag: Split) -> Self {
        self.split = vec![tag; self.len()];
        self
    }

    /// Rows carrying the given split tag.
    pub fn filter_split(&self, tag: Split) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == tag).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&GroupedDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Parameter("nothing to concatenate".into()))?;
        let d = first.num_features();
        let mut data = Vec::new();
        let (mut y, mut a, mut split) = (Vec::new(), Vec::new(), Vec::new());
        for p in parts {
            if p.num_features() != d || p.num_classes != first.num_classes {
                return Err(Error::Dimension("datasets disagree on features or classes".into()));
            }
            data.extend_from_slice(p.x.data());
            y.extend_from_slice(&p.y);
            a.extend_from_slice(&p.a);
            split.extend_from_slice(&p.split);
        }
        let x = Tensor::matrix(y.len(), d, data)?;
        Self::new(x, y, a, split, first.num_classes)
    }

    /// Returns a copy with labels replaced; `g` is recomputed.
    pub fn with_labels(&self, y: Vec<usize>) -> Result<Self> {
        Self::new(self.x.clone(), y, self.a.clone(), self.split.clone(), self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpuriousSpec {
    pub n: usize,
    pub d_core: usize,
    pub d_spur: usize,
    pub d_noise: usize,
    pub rho: f64,
    pub core_noise_sigma: f64,
    pub spur_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SpuriousSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            d_core: 4,
            d_spur: 4,
            d_noise: 4,
            rho: 0.95,
            core_noise_sigma: 2.0,
            spur_noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SpuriousSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if !(self.rho > 0.5 && self.rho <= 1.0) {
            return fail(format!("rho must lie in (0.5, 1], got {}", self.rho));
        }
        if self.d_core == 0 || self.d_spur == 0 || self.d_noise == 0 {
            return fail("every feature block needs width ≥ 1".into());
        }
        if !(self.spur_noise_sigma >= 0.0 && self.core_noise_sigma.is_finite()) {
            return fail("noise sigmas must be finite and non-negative".into());
        }
        if self.spur_noise_sigma >= self.core_noise_sigma {
            return fail(format!(
                "spur_noise_sigma ({}) must be below core_noise_sigma ({})",
                self.spur_noise_sigma, self.core_noise_sigma
            ));
        }
        if self.n < 2 {
            return fail(format!("n must be ≥ 2, got {}", self.n));
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.d_core + self.d_spur + self.d_noise
    }

    /// Column ranges of the core, spurious and noise blocks.
    pub fn blocks(&self) -> [std::ops::Range<usize>; 3] {
        let c = self.d_core;
        let s = c + self.d_spur;
        [0..c, c..s, s..s + self.d_noise]
    }
}

/// `n` samples at `spec.rho`, tagged [`Split::Train`].
pub fn generate(spec: &SpuriousSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    draw(spec, spec.n, spec.rho, &mut Rng::stream(spec.seed, STREAM_POOL), Split::Train)
}

/// `n` samples drawn at [`TEST_RHO`] from an independent stream, tagged [`Split::Test`].
pub fn generate_test(spec: &SpuriousSpec, n: usize) -> Result<GroupedDataset> {
    spec.validate()?;
    draw(spec, n, TEST_RHO, &mut Rng::stream(spec.seed, STREAM_TEST), Split::Test)
}

fn draw(spec: &SpuriousSpec, n: usize, rho: f64, rng: &mut Rng, tag: Split) -> Result<GroupedDataset> {
    let per_class = [n - n / 2, n / 2];
    let mut rows: Vec<(usize, usize)> = Vec::with_capacity(n);
    for (y, &count) in per_class.iter().enumerate() {
        let agree = (rho * count as f64).round() as usize;
        rows.extend(std::iter::repeat_n((y, y), agree));
        rows.extend(std::iter::repeat_n((y, 1 - y), count - agree));
    }
    rng.shuffle(&mut rows);

    let d = spec.num_features();
    let mean = |v: usize| if v == 1 { 1.0 } else { -1.0 };
    let mut data = Vec::with_capacity(n * d);
    for &(y, a) in &rows {
        for _ in 0..spec.d_core {
            data.push(mean(y) + spec.core_noise_sigma * rng.normal());
        }
        for _ in 0..spec.d_spur {
            data.push(mean(a) + spec.spur_noise_sigma * rng.normal());
        }
        for _ in 0..spec.d_noise {
            data.push(rng.normal());
        }
    }
    let (y, a) = rows.into_iter().unzip();
    GroupedDataset::new(Tensor::matrix(n, d, data)?, y, a, vec![tag; n], 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub heldout: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.5,
            heldout: 0.25,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.heldout, self.test]
    }
}

/// Largest-remainder apportionment of `n` into parts proportional to `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Stratified partition: part sizes are the apportionment of `n`, and each
/// group's count in each part is within one of its proportional share.
fn stratified_partition(ds: &GroupedDataset, fractions: &[f64], rng: &mut Rng) -> Vec<Vec<usize>> {
    let parts = fractions.len();
    let totals = apportion(ds.len(), fractions);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ds.num_groups()];
    for (i, &g) in ds.g().iter().enumerate() {
        members[g].push(i);
    }
    // per[g][k] starts at the floor of the group's quota; the leftovers are
    // handed out one per part, to the parts still furthest below their total.
    let mut per: Vec<Vec<usize>> = members
        .iter()
        .map(|m| fractions.iter().map(|f| (f * m.len() as f64).floor() as usize).collect())
        .collect();
    let mut need: Vec<usize> = (0..parts)
        .map(|k| totals[k] - per.iter().map(|p| p[k]).sum::<usize>())
        .collect();
    let mut spare: Vec<(usize, usize)> = members
        .iter()
        .zip(&per)
        .enumerate()
        .map(|(g, (m, p))| (g, m.len() - p.iter().sum::<usize>()))
        .collect();
    spare.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (g, r) in spare {
        let mut order: Vec<usize> = (0..parts).collect();
        order.sort_by(|&i, &j| need[j].cmp(&need[i]).then(i.cmp(&j)));
        for &k in order.iter().take(r) {
            per[g][k] += 1;
            need[k] = need[k].saturating_sub(1);
        }
    }

    let mut out = vec![Vec::new(); parts];
    for (g, m) in members.iter_mut().enumerate() {
        rng.shuffle(m);
        let mut off = 0;
        for k in 0..parts {
            out[k].extend_from_slice(&m[off..off + per[g][k]]);
            off += per[g][k];
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    out
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    Ok(())
}

/// Disjoint, covering, group-stratified three-way split, each part re-tagged.
pub fn split(
    ds: &GroupedDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    let fr = fractions.as_array();
    check_fractions(&fr)?;
    let sizes = apportion(ds.len(), &fr);
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Parameter(format!(
            "split {} would be empty ({} samples, fractions {fr:?})",
            [Split::Train, Split::HeldoutValid, Split::Test][k],
            ds.len()
        )));
    }
    let parts = stratified_partition(ds, &fr, &mut Rng::stream(seed, STREAM_SPLIT));
    Ok((
        ds.subset(&parts[0])?.with_split(Split::Train),
        ds.subset(&parts[1])?.with_split(Split::HeldoutValid),
        ds.subset(&parts[2])?.with_split(Split::Test),
    ))
}

/// The experiment layout: a `rho` pool of `spec.n` samples is cut into the
/// train and held-out shares of `fractions`, and a test split of the test
/// share's size is drawn at [`TEST_RHO`].
pub fn generate_splits(
    spec: &SpuriousSpec,
    fractions: SplitFractions,
) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    let fr = fractions.as_array();
    check_fractions(&fr)?;
    let sizes = apportion(spec.n, &fr);
    if sizes.contains(&0) {
        return Err(Error::Parameter(format!("n = {} leaves an empty split under {fr:?}", spec.n)));
    }
    let pool_spec = SpuriousSpec {
        n: sizes[0] + sizes[1],
        ..spec.clone()
    };
    let pool = generate(&pool_spec)?;
    let share = fractions.train / (fractions.train + fractions.heldout);
    let parts = stratified_partition(&pool, &[share, 1.0 - share], &mut Rng::stream(spec.seed, STREAM_SPLIT));
    let train = pool.subset(&parts[0])?.with_split(Split::Train);
    let heldout = pool.subset(&parts[1])?.with_split(Split::HeldoutValid);
    let test = generate_test(spec, sizes[2])?;
    Ok((train, heldout, test))
}

/// Endless stream of batches holding `batch_size / G` indices per group.
/// Each group is drawn from a reshuffled pass over its members; small groups
/// start a new pass as soon as they run out, so their samples repeat.
#[derive(Clone, Debug)]
pub struct GroupBalancedBatches {
    members: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    per_group: usize,
    rng: Rng,
}

pub fn group_balanced_batches(ds: &GroupedDataset, batch_size: usize, seed: u64) -> Result<GroupBalancedBatches> {
    let groups = ds.num_groups();
    if batch_size == 0 || !batch_size.is_multiple_of(groups) {
        return Err(Error::Parameter(format!(
            "batch size {batch_size} is not a positive multiple of {groups} groups"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (i, &g) in ds.g().iter().enumerate() {
        members[g].push(i);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("group {g} has no samples")));
    }
    let mut rng = Rng::new(seed);
    for m in &mut members {
        rng.shuffle(m);
    }
    Ok(GroupBalancedBatches {
        cursor: vec![0; groups],
        members,
        per_group: batch_size / groups,
        rng,
    })
}

impl Iterator for GroupBalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.per_group * self.members.len());
        for (g, m) in self.members.iter_mut().enumerate() {
            for _ in 0..self.per_group {
                if self.cursor[g] == m.len() {
                    self.rng.shuffle(m);
                    self.cursor[g] = 0;
                }
                batch.push(m[self.cursor[g]]);
                self.cursor[g] += 1;
            }
        }
        Some(batch)
    }
}

/// Writes `feature_0..feature_{d-1},y,a,g,split` with round-trip float text.
pub fn save_csv(ds: &GroupedDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..ds.num_features()).map(|j| format!("feature_{j}")).collect();
    header.extend(["y", "a", "g", "split"].map(String::from));
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x().row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.y[i].to_string());
        rec.push(ds.a[i].to_string());
        rec.push(ds.g[i].to_string());
        rec.push(ds.split[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    crate::util::write_atomic(path, &bytes)
}

/// Reads the [`save_csv`] layout. The class count is `max(y) + 1`, at least 2.
pub fn load_csv(path: &Path) -> Result<GroupedDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    let bad = |m: String| Error::format(path, m);
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let (cy, ca, cg, cs) = (col("y")?, col("a")?, col("g")?, col("split")?);
    let mut feats: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, h) in header.iter().enumerate() {
        if let Some(j) = h.strip_prefix("feature_") {
            let j: usize = j.parse().map_err(|_| bad(format!("bad feature column `{h}`")))?;
            feats.insert(j, pos);
        }
    }
    let d = feats.len();
    if d == 0 || feats.keys().copied().ne(0..d) {
        return Err(bad("feature columns must be feature_0..feature_{d-1}".into()));
    }

    let (mut data, mut y, mut a, mut g, mut split) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let cell = |pos: usize| rec.get(pos).ok_or_else(|| bad(format!("row {line}: short record")));
        for &pos in feats.values() {
            let v: f64 = cell(pos)?
                .parse()
                .map_err(|_| bad(format!("row {line}: non-numeric feature `{}`", rec.get(pos).unwrap_or(""))))?;
            data.push(v);
        }
        let int = |pos: usize, name: &str| -> Result<usize> {
            cell(pos)?
                .parse()
                .map_err(|_| bad(format!("row {line}: non-numeric `{name}`")))
        };
        y.push(int(cy, "y")?);
        a.push(int(ca, "a")?);
        g.push(int(cg, "g")?);
        split.push(cell(cs)?.parse::<Split>().map_err(|e| bad(format!("row {line}: {e}")))?);
    }
    let num_classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    let x = Tensor::matrix(y.len(), d, data)?;
    let ds = GroupedDataset::new(x, y, a, split, num_classes)?;
    if let Some(i) = (0..ds.len()).find(|&i| ds.g[i] != g[i]) {
        return Err(Error::Validation(format!(
            "row {i}: g = {} but (y, a) = ({}, {}) implies g = {}",
            g[i], ds.y[i], ds.a[i], ds.g[i]
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, rho: f64) -> SpuriousSpec {
        SpuriousSpec {
            n,
            rho,
            ..SpuriousSpec::default()
        }
    }

    #[test]
    fn exact_group_counts() {
        let ds = generate(&spec(1000, 0.95)).unwrap();
        assert_eq!(ds.group_counts(), vec![475, 25, 25, 475]);
    }

    #[test]
    fn attribute_agreement_is_exactly_rho() {
        let ds = generate(&spec(5000, 0.95)).unwrap();
        let agree = ds.y().iter().zip(ds.a()).filter(|(y, a)| y == a).count();
        assert_eq!(agree as f64 / ds.len() as f64, 0.95);
    }

    #[test]
    fn rho_one_still_has_every_test_group() {
        let s = spec(1000, 1.0);
        let train = generate(&s).unwrap();
        assert_eq!(train.group_counts(), vec![500, 0, 0, 500]);
        let test = generate_test(&s, 200).unwrap();
        assert!(test.group_counts().iter().all(|&c| c == 50));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec(300, 0.9)).unwrap(), generate(&spec(300, 0.9)).unwrap());
        let mut other = spec(300, 0.9);
        other.seed = 1;
        assert_ne!(generate(&spec(300, 0.9)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            spec(100, 0.5),
            spec(100, 1.01),
            SpuriousSpec {
                d_core: 0,
                ..spec(100, 0.9)
            },
            SpuriousSpec {
                spur_noise_sigma: 3.0,
                ..spec(100, 0.9)
            },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Parameter(_))), "{bad:?}");
        }
    }

    #[test]
    fn feature_blocks_centre_on_labels() {
        let s = spec(4000, 0.95);
        let ds = generate(&s).unwrap();
        let [core, spur, _] = s.blocks();
        let mean_for = |cols: std::ops::Range<usize>, sel: &dyn Fn(usize) -> bool| {
            let mut acc = 0.0;
            let mut k = 0;
            for i in (0..ds.len()).filter(|&i| sel(i)) {
                for j in cols.clone() {
                    acc += ds.x().at(i, j);
                    k += 1;
                }
            }
            acc / k as f64
        };
        assert!((mean_for(core.clone(), &|i| ds.y()[i] == 1) - 1.0).abs() < 0.1);
        assert!((mean_for(core, &|i| ds.y()[i] == 0) + 1.0).abs() < 0.1);
        assert!((mean_for(spur.clone(), &|i| ds.a()[i] == 1) - 1.0).abs() < 0.05);
        assert!((mean_for(spur, &|i| ds.a()[i] == 0) + 1.0).abs() < 0.05);
    }

    #[test]
    fn split_sizes() {
        let ds = generate(&spec(1000, 0.95)).unwrap();
        let fr = SplitFractions {
            train: 0.8,
            heldout: 0.1,
            test: 0.1,
        };
        let (tr, hv, te) = split(&ds, fr, 0).unwrap();
        assert_eq!((tr.len(), hv.len(), te.len()), (800, 100, 100));
        assert!(tr.split_tags().iter().all(|&s| s == Split::Train));
        assert!(hv.split_tags().iter().all(|&s| s == Split::HeldoutValid));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = generate(&spec(100, 0.9)).unwrap();
        let fr = |train, heldout, test| SplitFractions { train, heldout, test };
        assert!(split(&ds, fr(0.5, 0.5, 0.5), 0).is_err());
        assert!(split(&ds, fr(1.0, 0.0, 0.0), 0).is_err());
        assert!(split(&ds, fr(0.99, 0.005, 0.005), 0).is_err());
    }

    #[test]
    fn batches_hold_equal_group_shares() {
        let ds = generate(&spec(1000, 0.95)).unwrap();
        let batches: Vec<Vec<usize>> = group_balanced_batches(&ds, 32, 7).unwrap().take(1000).collect();
        let mut totals = [0usize; 4];
        for b in &batches {
            assert_eq!(b.len(), 32);
            let mut c = [0usize; 4];
            for &i in b {
                c[ds.g()[i]] += 1;
            }
            assert_eq!(c, [8; 4]);
            for g in 0..4 {
                totals[g] += c[g];
            }
        }
        for t in totals {
            assert!((t as f64 / 32_000.0 - 0.25).abs() <= 1e-9);
        }
    }

    #[test]
    fn small_groups_are_resampled() {
        let s = spec(1000, 0.995);
        let ds = generate(&s).unwrap();
        assert_eq!(ds.group_counts()[1], 2);
        let b = group_balanced_batches(&ds, 32, 1).unwrap().next().unwrap();
        let minority: Vec<usize> = b.into_iter().filter(|&i| ds.g()[i] == 1).collect();
        assert_eq!(minority.len(), 8);
        let mut uniq = minority.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 2);
    }

    #[test]
    fn batches_reject_bad_inputs() {
        let ds = generate(&spec(1000, 0.95)).unwrap();
        assert!(matches!(group_balanced_batches(&ds, 30, 0), Err(Error::Parameter(_))));
        let only_majority: Vec<usize> = (0..ds.len()).filter(|&i| ds.y()[i] == ds.a()[i]).collect();
        let sub = ds.subset(&only_majority).unwrap();
        assert!(matches!(group_balanced_batches(&sub, 32, 0), Err(Error::Data(_))));
    }

    #[test]
    fn labels_and_groups_stay_consistent() {
        let ds = generate(&spec(200, 0.9)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.g()[i], 2 * ds.y()[i] + ds.a()[i]);
        }
    }
}
