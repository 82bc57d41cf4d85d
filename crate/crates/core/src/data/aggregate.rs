use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::ImpressionRecord;
use super::schema::AuxSchema;
use super::DataError;

/// Default impression floor below which a level is merged away.
pub const DEFAULT_MERGE_THRESHOLD: u64 = 50_000;

/// One unique (image, attribute tuple) exposure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedInstance {
    pub image_id: String,
    pub attributes: BTreeMap<String, String>,
    /// CTR, exactly `clicks / w`.
    pub y: f64,
    /// Impressions.
    pub w: u64,
    pub clicks: u64,
}

impl AggregatedInstance {
    fn new(image_id: String, attributes: BTreeMap<String, String>, clicks: u64, w: u64) -> Self {
        Self {
            image_id,
            attributes,
            y: clicks as f64 / w as f64,
            w,
            clicks,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.w == 0 || self.clicks > self.w {
            return Err(format!("clicks {} / impressions {} out of range", self.clicks, self.w));
        }
        if self.y != self.clicks as f64 / self.w as f64 {
            return Err(format!("y {} is not clicks / w", self.y));
        }
        Ok(())
    }
}

type Key = (String, BTreeMap<String, String>);

/// Streaming group-by over records. Shards can be folded separately and
/// combined with [`merge`](Self::merge); the result does not depend on how
/// records were split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregator {
    groups: BTreeMap<Key, (u64, u64)>,
    records: u64,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, r: ImpressionRecord) {
        let e = self.groups.entry((r.image_id, r.attributes)).or_insert((0, 0));
        e.0 += r.clicked as u64;
        e.1 += 1;
        self.records += 1;
    }

    pub fn merge(&mut self, other: Aggregator) {
        for (k, (c, w)) in other.groups {
            let e = self.groups.entry(k).or_insert((0, 0));
            e.0 += c;
            e.1 += w;
        }
        self.records += other.records;
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn groups(&self) -> usize {
        self.groups.len()
    }

    /// Instances with at least `min_impressions` impressions, sorted by
    /// (image id, attributes).
    pub fn finish(&self, min_impressions: u64) -> Vec<AggregatedInstance> {
        self.groups
            .iter()
            .filter(|(_, &(_, w))| w >= min_impressions.max(1))
            .map(|((id, attrs), &(c, w))| AggregatedInstance::new(id.clone(), attrs.clone(), c, w))
            .collect()
    }
}

pub fn aggregate(records: impl IntoIterator<Item = ImpressionRecord>, min_impressions: u64) -> Vec<AggregatedInstance> {
    let mut agg = Aggregator::new();
    for r in records {
        agg.add(r);
    }
    agg.finish(min_impressions)
}

/// One relabeling step of [`merge_rare_levels`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMerge {
    pub attribute: String,
    pub from: String,
    pub to: String,
    pub impressions: u64,
}

/// Repeatedly relabels the observed level with the fewest impressions,
/// while it is below `threshold`, to its closest level: for ordinal
/// attributes the adjacent observed level with more impressions (the lower
/// one on a tie), otherwise the level whose pooled CTR is nearest (earlier
/// schema level on a tie). Instances that collide after relabeling are
/// summed. Every step removes one level, so the loop ends with all levels
/// at or above the threshold or a single level left.
pub fn merge_rare_levels(
    instances: Vec<AggregatedInstance>,
    schema: &AuxSchema,
    attribute: &str,
    threshold: u64,
) -> Result<(Vec<AggregatedInstance>, Vec<LevelMerge>), DataError> {
    let (levels, ordinal) = schema
        .levels(attribute)
        .ok_or_else(|| DataError::Schema(format!("`{attribute}` is not a categorical attribute of the schema")))?;
    let mut instances = instances;
    let mut merges = Vec::new();
    loop {
        let mut totals: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
        for inst in &instances {
            let v = inst
                .attributes
                .get(attribute)
                .ok_or_else(|| DataError::Schema(format!("instance of `{}` has no `{attribute}`", inst.image_id)))?;
            let i = levels
                .iter()
                .position(|l| l == v)
                .ok_or_else(|| DataError::Schema(format!("unknown level `{v}` for `{attribute}`")))?;
            let e = totals.entry(i).or_insert((0, 0));
            e.0 += inst.clicks;
            e.1 += inst.w;
        }
        let observed: Vec<usize> = totals.keys().copied().collect();
        if observed.len() < 2 {
            break;
        }
        let Some(&rare) = observed
            .iter()
            .filter(|i| totals[i].1 < threshold)
            .min_by_key(|&&i| (totals[&i].1, i))
        else {
            break;
        };
        let target = if ordinal {
            let pos = observed.iter().position(|&i| i == rare).expect("rare is observed");
            let prev = pos.checked_sub(1).map(|p| observed[p]);
            let next = observed.get(pos + 1).copied();
            match (prev, next) {
                (Some(p), Some(n)) if totals[&n].1 > totals[&p].1 => n,
                (Some(p), _) => p,
                (None, Some(n)) => n,
                (None, None) => unreachable!("at least two observed levels"),
            }
        } else {
            let ctr = |i: usize| totals[&i].0 as f64 / totals[&i].1 as f64;
            let r = ctr(rare);
            *observed
                .iter()
                .filter(|&&i| i != rare)
                .min_by(|&&a, &&b| (ctr(a) - r).abs().total_cmp(&(ctr(b) - r).abs()).then(a.cmp(&b)))
                .expect("another level exists")
        };
        merges.push(LevelMerge {
            attribute: attribute.to_string(),
            from: levels[rare].clone(),
            to: levels[target].clone(),
            impressions: totals[&rare].1,
        });
        instances = relabel(instances, attribute, &levels[rare], &levels[target]);
    }
    Ok((instances, merges))
}

fn relabel(instances: Vec<AggregatedInstance>, attribute: &str, from: &str, to: &str) -> Vec<AggregatedInstance> {
    let mut groups: BTreeMap<Key, (u64, u64)> = BTreeMap::new();
    for mut inst in instances {
        if inst.attributes.get(attribute).map(String::as_str) == Some(from) {
            inst.attributes.insert(attribute.to_string(), to.to_string());
        }
        let e = groups.entry((inst.image_id, inst.attributes)).or_insert((0, 0));
        e.0 += inst.clicks;
        e.1 += inst.w;
    }
    groups
        .into_iter()
        .map(|((id, attrs), (c, w))| AggregatedInstance::new(id, attrs, c, w))
        .collect()
}
