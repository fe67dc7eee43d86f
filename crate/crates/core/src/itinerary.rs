//! Airline itineraries under a nested-logit model with six nests
//! ({non-stop, with stops} × {morning, afternoon, evening}).
//!
//! Each itinerary has 17 features, in this order: time-period dummies 2–9,
//! carrier dummies 2–5, an equipment-type-2 dummy, high- and low-yield fares,
//! elapsed time in minutes and a non-stop dummy. Period 1 and carrier 1 are
//! the reference levels (all their dummies zero).

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::SyntheticOracle;
use crate::choice::{Instance, NestConfig};
use crate::error::{Error, Result};

pub const FEATURE_COUNT: usize = 17;
pub const NEST_COUNT: usize = 6;

/// Column names of the itinerary CSV, `id` first.
pub const CSV_HEADER: [&str; FEATURE_COUNT + 1] = [
    "id",
    "time_period_2",
    "time_period_3",
    "time_period_4",
    "time_period_5",
    "time_period_6",
    "time_period_7",
    "time_period_8",
    "time_period_9",
    "carrier_2",
    "carrier_3",
    "carrier_4",
    "carrier_5",
    "equipment_type_2",
    "high_yield_fare",
    "low_yield_fare",
    "elapsed_time",
    "non_stop",
];

const TIME_PERIODS: std::ops::Range<usize> = 0..8;
const CARRIERS: std::ops::Range<usize> = 8..12;
const EQUIPMENT: usize = 12;
const HIGH_FARE: usize = 13;
const LOW_FARE: usize = 14;
/// Feature index of the elapsed time in minutes.
pub const ELAPSED: usize = 15;
/// Feature index of the non-stop dummy.
pub const NON_STOP: usize = 16;

/// Bundled coefficient file.
pub const DEFAULT_COEFFICIENTS_TOML: &str = include_str!("../data/itinerary_coefficients.toml");
/// Bundled synthetic itinerary file (543 rows).
pub const SYNTHETIC_ITINERARIES_CSV: &str = include_str!("../data/itineraries_synthetic.csv");
/// Seed the bundled synthetic file was generated with.
pub const SYNTHETIC_SEED: u64 = 2013;

/// Linear utility coefficients and the shared logsum parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItineraryCoefficients {
    pub time_period_2: f64,
    pub time_period_3: f64,
    pub time_period_4: f64,
    pub time_period_5: f64,
    pub time_period_6: f64,
    pub time_period_7: f64,
    pub time_period_8: f64,
    pub time_period_9: f64,
    pub carrier_2: f64,
    pub carrier_3: f64,
    pub carrier_4: f64,
    pub carrier_5: f64,
    pub equipment_type_2: f64,
    pub high_yield_fare: f64,
    pub low_yield_fare: f64,
    pub elapsed_time: f64,
    pub non_stop: f64,
    pub logsum: f64,
}

impl Default for ItineraryCoefficients {
    fn default() -> Self {
        Self {
            time_period_2: 0.082,
            time_period_3: 0.104,
            time_period_4: 0.069,
            time_period_5: 0.110,
            time_period_6: 0.204,
            time_period_7: 0.259,
            time_period_8: 0.265,
            time_period_9: -0.076,
            carrier_2: 0.095,
            carrier_3: 0.500,
            carrier_4: 0.435,
            carrier_5: -0.508,
            equipment_type_2: 0.379,
            high_yield_fare: -0.001,
            low_yield_fare: -0.001,
            elapsed_time: -0.005,
            non_stop: -3.090,
            logsum: 0.792,
        }
    }
}

impl ItineraryCoefficients {
    /// The coefficient vector in feature order.
    pub fn vector(&self) -> [f64; FEATURE_COUNT] {
        [
            self.time_period_2,
            self.time_period_3,
            self.time_period_4,
            self.time_period_5,
            self.time_period_6,
            self.time_period_7,
            self.time_period_8,
            self.time_period_9,
            self.carrier_2,
            self.carrier_3,
            self.carrier_4,
            self.carrier_5,
            self.equipment_type_2,
            self.high_yield_fare,
            self.low_yield_fare,
            self.elapsed_time,
            self.non_stop,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logsum > 0.0 && self.logsum <= 1.0) {
            return Err(Error::InvalidParameter(format!("logsum must lie in (0, 1], got {}", self.logsum)));
        }
        if self.vector().iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let c: Self = serde_json::from_str(&text)?;
                c.validate()?;
                Ok(c)
            }
            _ => Self::from_toml(&text),
        }
    }
}

/// Departure-time bucket of a time period (1–9). Periods 1–4 are morning,
/// 5–7 afternoon and 8–9 evening by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBuckets {
    /// Bucket index (0 morning, 1 afternoon, 2 evening) per period 1–9.
    pub bucket_of_period: [usize; 9],
}

impl Default for TimeBuckets {
    fn default() -> Self {
        Self { bucket_of_period: [0, 0, 0, 0, 1, 1, 1, 2, 2] }
    }
}

impl TimeBuckets {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_of_period.iter().any(|&b| b > 2) {
            return Err(Error::Config("time buckets must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub id: usize,
    pub features: [f64; FEATURE_COUNT],
    /// `3·stop + bucket` with stop = 0 for non-stop.
    pub nest: usize,
}

impl Itinerary {
    /// Time period 1–9 (1 when no period dummy is set).
    pub fn time_period(&self) -> usize {
        TIME_PERIODS.clone().find(|&k| self.features[k] == 1.0).map_or(1, |k| k + 2)
    }

    pub fn is_non_stop(&self) -> bool {
        self.features[NON_STOP] == 1.0
    }
}

fn nest_for(features: &[f64; FEATURE_COUNT], buckets: &TimeBuckets) -> usize {
    let period = TIME_PERIODS.clone().find(|&k| features[k] == 1.0).map_or(1, |k| k + 2);
    let stop = usize::from(features[NON_STOP] != 1.0);
    3 * stop + buckets.bucket_of_period[period - 1]
}

/// Dot product of features and coefficients.
pub fn utility(it: &Itinerary, coeffs: &ItineraryCoefficients) -> f64 {
    it.features.iter().zip(coeffs.vector()).map(|(x, c)| x * c).sum()
}

/// How the nest-level term of the choice probability is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `exp(λΓ_m) / Σ exp(λΓ_m')`: probabilities sum to one.
    #[default]
    Standard,
    /// `exp(λΓ_m) / Σ exp(Γ_m')`, exactly as the model is often printed.
    Literal,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Nested-logit choice probabilities with one shared logsum `λ`:
/// `P_i = [exp(λΓ_m)/Σ_m' ...] · exp(U_i/λ − Γ_m)` with
/// `Γ_m = ln Σ_{i∈m} exp(U_i/λ)`.
pub fn nl_choice_prob(
    utilities: &[f64],
    nests: &[usize],
    nest_count: usize,
    lambda: f64,
    normalization: Normalization,
) -> Result<Vec<f64>> {
    if utilities.len() != nests.len() {
        return Err(Error::InvalidParameter(format!("{} utilities but {} nests", utilities.len(), nests.len())));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!("logsum must lie in (0, 1], got {lambda}")));
    }
    let mut gamma = vec![f64::NEG_INFINITY; nest_count];
    for m in 0..nest_count {
        let members = utilities.iter().zip(nests).filter(|(_, &k)| k == m).map(|(u, _)| u / lambda);
        gamma[m] = log_sum_exp(members);
        if gamma[m] == f64::NEG_INFINITY {
            return Err(Error::Config(format!("nest {m} has no alternatives")));
        }
    }
    if let Some(&bad) = nests.iter().find(|&&k| k >= nest_count) {
        return Err(Error::Config(format!("nest {bad} out of range for {nest_count} nests")));
    }
    let denom = match normalization {
        Normalization::Standard => log_sum_exp(gamma.iter().map(|g| lambda * g)),
        Normalization::Literal => log_sum_exp(gamma.iter().copied()),
    };
    Ok(utilities
        .iter()
        .zip(nests)
        .map(|(u, &m)| (lambda * gamma[m] - denom + u / lambda - gamma[m]).exp())
        .collect())
}

/// Choice probabilities for a list of itineraries.
pub fn itinerary_choice_probs(its: &[Itinerary], coeffs: &ItineraryCoefficients, normalization: Normalization) -> Result<Vec<f64>> {
    let u: Vec<f64> = its.iter().map(|it| utility(it, coeffs)).collect();
    let nests: Vec<usize> = its.iter().map(|it| it.nest).collect();
    nl_choice_prob(&u, &nests, NEST_COUNT, coeffs.logsum, normalization)
}

/// Parses itineraries from CSV with [`CSV_HEADER`] columns. Line numbers in
/// errors count the header as line 1.
pub fn read_itineraries<R: Read>(input: R, buckets: &TimeBuckets) -> Result<Vec<Itinerary>> {
    buckets.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let cols: Vec<&str> = headers.iter().collect();
    if cols != CSV_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, got {}", CSV_HEADER.len(), record.len()) });
        }
        let id: usize = record[0]
            .parse()
            .map_err(|e| Error::Parse { line, message: format!("id '{}': {e}", &record[0]) })?;
        let mut features = [0.0; FEATURE_COUNT];
        for k in 0..FEATURE_COUNT {
            let raw = &record[k + 1];
            features[k] = raw
                .parse()
                .map_err(|e| Error::Parse { line, message: format!("{} '{raw}': {e}", CSV_HEADER[k + 1]) })?;
        }
        validate_features(&features).map_err(|message| Error::Validation { line, message })?;
        out.push(Itinerary { id, features, nest: nest_for(&features, buckets) });
    }
    Ok(out)
}

fn validate_features(f: &[f64; FEATURE_COUNT]) -> std::result::Result<(), String> {
    let dummies = TIME_PERIODS.chain(CARRIERS).chain([EQUIPMENT, NON_STOP]);
    for k in dummies {
        if f[k] != 0.0 && f[k] != 1.0 {
            return Err(format!("{} must be 0 or 1, got {}", CSV_HEADER[k + 1], f[k]));
        }
    }
    if TIME_PERIODS.filter(|&k| f[k] == 1.0).count() > 1 {
        return Err("more than one time-period dummy set".into());
    }
    if CARRIERS.filter(|&k| f[k] == 1.0).count() > 1 {
        return Err("more than one carrier dummy set".into());
    }
    for k in [HIGH_FARE, LOW_FARE, ELAPSED] {
        if !(f[k].is_finite() && f[k] >= 0.0) {
            return Err(format!("{} must be a non-negative number, got {}", CSV_HEADER[k + 1], f[k]));
        }
    }
    Ok(())
}

pub fn load_itineraries(path: &Path, buckets: &TimeBuckets) -> Result<Vec<Itinerary>> {
    read_itineraries(std::fs::File::open(path)?, buckets)
}

/// The bundled 543-row synthetic file.
pub fn bundled_itineraries() -> Vec<Itinerary> {
    read_itineraries(SYNTHETIC_ITINERARIES_CSV.as_bytes(), &TimeBuckets::default()).expect("bundled file is valid")
}

pub fn write_itineraries<W: std::io::Write>(out: W, its: &[Itinerary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for it in its {
        let mut row = vec![it.id.to_string()];
        row.extend(it.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Synthetic itineraries from simple marginals:
///
/// * time period 1–9 with weights 2:3:3:3:3:3:3:3:2, carrier 1–5 with
///   weights 3:2:2:2:1, equipment type 2 with probability 0.4;
/// * non-stop with probability 0.3; elapsed minutes ~ N(150, 30²) clipped to
///   [60, 300] for non-stop, N(320, 70²) clipped to [150, 720] otherwise;
/// * high-yield fare ~ LogNormal(ln 650, 0.35) and low-yield fare ~
///   LogNormal(ln 260, 0.3), in dollars to the cent.
pub fn synthesize_itineraries(count: usize, seed: u64) -> Vec<Itinerary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, weights: &[u32]| -> usize {
        let total: u32 = weights.iter().sum();
        let mut r = rng.random_range(0..total);
        for (k, &w) in weights.iter().enumerate() {
            if r < w {
                return k;
            }
            r -= w;
        }
        unreachable!("draw below total weight")
    };
    let direct = Normal::<f64>::new(150.0, 30.0).expect("valid normal");
    let connecting = Normal::<f64>::new(320.0, 70.0).expect("valid normal");
    let high = LogNormal::new(650f64.ln(), 0.35).expect("valid lognormal");
    let low = LogNormal::new(260f64.ln(), 0.3).expect("valid lognormal");
    let cents = |v: f64| (v * 100.0).round() / 100.0;
    (0..count)
        .map(|id| {
            let mut f = [0.0; FEATURE_COUNT];
            let period = pick(&mut rng, &[2, 3, 3, 3, 3, 3, 3, 3, 2]) + 1;
            if period >= 2 {
                f[period - 2] = 1.0;
            }
            let carrier = pick(&mut rng, &[3, 2, 2, 2, 1]) + 1;
            if carrier >= 2 {
                f[CARRIERS.start + carrier - 2] = 1.0;
            }
            f[EQUIPMENT] = f64::from(u8::from(rng.random_bool(0.4)));
            let non_stop = rng.random_bool(0.3);
            f[NON_STOP] = f64::from(u8::from(non_stop));
            f[ELAPSED] = if non_stop {
                direct.sample(&mut rng).clamp(60.0, 300.0)
            } else {
                connecting.sample(&mut rng).clamp(150.0, 720.0)
            }
            .round();
            f[HIGH_FARE] = cents(high.sample(&mut rng));
            f[LOW_FARE] = cents(low.sample(&mut rng));
            Itinerary { id, features: f, nest: nest_for(&f, &TimeBuckets::default()) }
        })
        .collect()
}

/// Oracle comparing true utilities with the shared logsum in every nest.
pub fn itinerary_oracle(its: &[Itinerary], coeffs: &ItineraryCoefficients, truth: Vec<f64>, seed: u64) -> Result<SyntheticOracle> {
    let u: Vec<f64> = its.iter().map(|it| utility(it, coeffs)).collect();
    let nests = NestConfig::uniform(NEST_COUNT, coeffs.logsum, its.iter().map(|it| it.nest).collect())?;
    Ok(SyntheticOracle::new(u, truth, nests, seed))
}

/// Instances for the learner: features rescaled to `[0, 1]` per column
/// (constant columns become 0), ids renumbered by position.
pub fn to_instances(its: &[Itinerary]) -> Vec<Instance> {
    let mut lo = [f64::INFINITY; FEATURE_COUNT];
    let mut hi = [f64::NEG_INFINITY; FEATURE_COUNT];
    for it in its {
        for k in 0..FEATURE_COUNT {
            lo[k] = lo[k].min(it.features[k]);
            hi[k] = hi[k].max(it.features[k]);
        }
    }
    its.iter()
        .enumerate()
        .map(|(pos, it)| {
            let x = (0..FEATURE_COUNT)
                .map(|k| if hi[k] > lo[k] { (it.features[k] - lo[k]) / (hi[k] - lo[k]) } else { 0.0 })
                .collect();
            Instance::new(pos, x, it.nest)
        })
        .collect()
}
