#include "hmtl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "hmtl/error.hpp"
#include "hmtl/linalg.hpp"
#include "hmtl/rng.hpp"
#include "json.hpp"

namespace hmtl::data {

namespace {
constexpr double kMinSeparation = 0.8;
constexpr uint64_t kMorseMasterSeed = 0x4d4f525345ull;  // pair-table seed
}  // namespace

MorseParams morse_params(uint8_t ea, uint8_t eb) {
  if (ea > eb) std::swap(ea, eb);
  uint64_t h = splitmix64(kMorseMasterSeed ^ (uint64_t(ea) * 131 + eb));
  Rng rng(h);
  MorseParams p;
  p.depth = rng.uniform(0.4, 1.2);
  p.width = rng.uniform(0.8, 1.3);
  p.r0 = rng.uniform(1.0, 1.4);
  return p;
}

// V(r) = D * ((1 - e^{-a (r - r0)})^2 - 1); V(r0) = -D, V(inf) = 0
double morse_energy(double r, const MorseParams& p) {
  double x = std::exp(-p.width * (r - p.r0));
  double om = 1.0 - x;
  return p.depth * (om * om - 1.0);
}

// dV/dr = 2 a D x (1 - x); exactly zero at r = r0
double morse_dEdr(double r, const MorseParams& p) {
  double x = std::exp(-p.width * (r - p.r0));
  return 2.0 * p.width * p.depth * x * (1.0 - x);
}

void ground_truth(const std::vector<uint8_t>& species,
                  const std::vector<double>& positions, double* energy,
                  std::vector<double>* forces) {
  const size_t n = species.size();
  double e = 0.0;
  forces->assign(3 * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      double dx = positions[3 * i] - positions[3 * j];
      double dy = positions[3 * i + 1] - positions[3 * j + 1];
      double dz = positions[3 * i + 2] - positions[3 * j + 2];
      double r = std::sqrt(dx * dx + dy * dy + dz * dz);
      MorseParams p = morse_params(species[i], species[j]);
      e += morse_energy(r, p);
      double g = morse_dEdr(r, p) / r;  // dV/dr * dr/dx chain
      (*forces)[3 * i] -= g * dx;
      (*forces)[3 * i + 1] -= g * dy;
      (*forces)[3 * i + 2] -= g * dz;
      (*forces)[3 * j] += g * dx;
      (*forces)[3 * j + 1] += g * dy;
      (*forces)[3 * j + 2] += g * dz;
    }
  }
  *energy = e;
}

namespace {

// Places n atoms uniformly in a cube with pairwise separation >= d_min.
// Returns false if the retry budget runs out.
bool place_atoms(Rng& rng, size_t n, std::vector<double>* pos) {
  const double side = 1.6 * std::cbrt(static_cast<double>(n)) + 0.8;
  pos->assign(3 * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      double x = rng.uniform(0.0, side);
      double y = rng.uniform(0.0, side);
      double z = rng.uniform(0.0, side);
      placed = true;
      for (size_t j = 0; j < i; ++j) {
        double dx = x - (*pos)[3 * j], dy = y - (*pos)[3 * j + 1],
               dz = z - (*pos)[3 * j + 2];
        if (dx * dx + dy * dy + dz * dz < kMinSeparation * kMinSeparation) {
          placed = false;
          break;
        }
      }
      if (placed) {
        (*pos)[3 * i] = x;
        (*pos)[3 * i + 1] = y;
        (*pos)[3 * i + 2] = z;
      }
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace

std::vector<AtomisticSample> generate_dataset(const DatasetSpec& spec,
                                              uint64_t seed) {
  require(spec.n_min >= 2 && spec.n_max >= spec.n_min,
          "dataset spec: need n_min >= 2", ErrorCode::data);
  require(spec.alpha > 0.0, "dataset spec: alpha must be positive",
          ErrorCode::data);
  require(!spec.elements.empty(), "dataset spec: empty element set",
          ErrorCode::data);
  for (uint8_t e : spec.elements)
    require(e < kNumElements, "dataset spec: element index out of range",
            ErrorCode::data);

  // Structures and label noise draw from separate streams so that two specs
  // with the same structure_seed label identical configurations.
  uint64_t struct_seed =
      spec.structure_seed >= 0
          ? seed_stream(static_cast<uint64_t>(spec.structure_seed), 0xA)
          : seed_stream(seed, 0xA00 + spec.dataset_id);
  Rng srng(struct_seed);
  Rng nrng(seed_stream(seed, 0xB00 + spec.dataset_id));

  std::vector<AtomisticSample> out;
  out.reserve(spec.count);
  for (uint64_t k = 0; k < spec.count; ++k) {
    size_t n = spec.n_min +
               srng.uniform_int(static_cast<uint64_t>(spec.n_max - spec.n_min + 1));
    AtomisticSample s;
    s.dataset_id = spec.dataset_id;
    s.species.resize(n);
    for (size_t i = 0; i < n; ++i)
      s.species[i] = spec.elements[srng.uniform_int(spec.elements.size())];

    bool ok = false;
    for (int retry = 0; retry < 20 && !ok; ++retry)
      ok = place_atoms(srng, n, &s.positions);
    require(ok, "generate_dataset: rejection sampling failed (box too dense)",
            ErrorCode::data);

    double e_true;
    std::vector<double> f_true;
    ground_truth(s.species, s.positions, &e_true, &f_true);

    double offset = 0.0;
    for (size_t i = 0; i < n; ++i) offset += spec.mu[s.species[i]];
    s.energy_per_atom = spec.alpha * e_true / double(n) + offset / double(n);
    if (spec.sigma > 0.0) s.energy_per_atom += nrng.normal(0.0, spec.sigma);

    s.forces.resize(3 * n);
    for (size_t i = 0; i < 3 * n; ++i) {
      s.forces[i] = spec.alpha * f_true[i];
      if (spec.sigma > 0.0) s.forces[i] += nrng.normal(0.0, spec.sigma);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void generate_to_file(const DatasetSpec& spec, uint64_t seed,
                      const std::string& out_path) {
  io::FileHeader hdr;
  hdr.dataset_id = spec.dataset_id;
  hdr.aligned = 0;
  io::write_sample_file(out_path, hdr, generate_dataset(spec, seed));
}

// ---- spec files ----

std::vector<DatasetSpec> parse_spec_json(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open spec file: " + path, ErrorCode::config);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(ErrorCode::config, "bad spec json: " + std::string(e.what()));
  }
  require(j.contains("datasets") && j["datasets"].is_array(),
          "spec json: missing 'datasets' array", ErrorCode::config);
  std::vector<DatasetSpec> specs;
  for (const auto& d : j["datasets"]) {
    DatasetSpec s;
    s.name = d.value("name", "d" + std::to_string(specs.size()));
    s.dataset_id = d.at("dataset_id").get<uint8_t>();
    for (const auto& e : d.at("elements"))
      s.elements.push_back(e.get<uint8_t>());
    s.n_min = d.value("n_min", 2);
    s.n_max = d.value("n_max", 8);
    s.alpha = d.value("alpha", 1.0);
    s.sigma = d.value("sigma", 0.0);
    s.count = d.value("count", uint64_t(1000));
    s.structure_seed = d.value("structure_seed", int64_t(-1));
    if (d.contains("mu")) {
      for (const auto& [key, val] : d["mu"].items()) {
        int e = std::stoi(key);
        require(e >= 0 && e < kNumElements, "spec json: mu element range",
                ErrorCode::config);
        s.mu[e] = val.get<double>();
      }
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

// Five sources mimicking the organic/inorganic mix: three with small element
// sets and small molecules, two with broad element sets and larger cells.
// Distinct (alpha, mu, sigma) per source creates the multi-fidelity offsets.
std::vector<DatasetSpec> default5_specs() {
  auto mk = [](const char* name, uint8_t id, std::vector<uint8_t> elems,
               int nmin, int nmax, double alpha, double sigma,
               uint64_t count) {
    DatasetSpec s;
    s.name = name;
    s.dataset_id = id;
    s.elements = std::move(elems);
    s.n_min = nmin;
    s.n_max = nmax;
    s.alpha = alpha;
    s.sigma = sigma;
    s.count = count;
    Rng r(seed_stream(0x0FF5E75, id));
    for (uint8_t e : s.elements) s.mu[e] = r.uniform(-3.0, 3.0);
    return s;
  };
  return {
      mk("organicA", 0, {0, 1, 2, 3}, 4, 12, 1.00, 0.01, 10000),
      mk("organicB", 1, {0, 2, 3, 4, 5}, 4, 16, 0.70, 0.02, 10000),
      mk("organicC", 2, {0, 1, 3, 5, 6, 7}, 4, 14, 1.35, 0.01, 10000),
      mk("inorganicA", 3, {2, 5, 8, 9, 10, 11, 12, 13, 14, 15}, 8, 40, 0.55,
         0.03, 10000),
      mk("inorganicB", 4, {3, 6, 9, 12, 14, 16, 17, 18, 19}, 8, 64, 1.60,
         0.02, 10000),
  };
}

std::string default5_spec_json() {
  nlohmann::json j;
  j["datasets"] = nlohmann::json::array();
  for (const DatasetSpec& s : default5_specs()) {
    nlohmann::json d;
    d["name"] = s.name;
    d["dataset_id"] = s.dataset_id;
    d["elements"] = s.elements;
    d["n_min"] = s.n_min;
    d["n_max"] = s.n_max;
    d["alpha"] = s.alpha;
    d["sigma"] = s.sigma;
    d["count"] = s.count;
    nlohmann::json mu;
    for (int e = 0; e < kNumElements; ++e)
      if (s.mu[e] != 0.0) mu[std::to_string(e)] = s.mu[e];
    d["mu"] = mu;
    j["datasets"].push_back(d);
  }
  return j.dump(2);
}

// ---- alignment ----

namespace {

struct LoadedSet {
  std::string path;
  io::FileHeader hdr;
  std::vector<AtomisticSample> samples;
  std::vector<uint8_t> present;  // elements with nonzero count
};

// mu_hat via normal equations over per-atom element fractions
std::array<double, kNumElements> fit_offsets(const LoadedSet& set,
                                             std::vector<uint8_t>* skipped) {
  const auto& elems = set.present;
  const size_t k = elems.size();
  std::vector<double> xtx(k * k, 0.0), xty(k, 0.0), frac(k);
  for (const AtomisticSample& s : set.samples) {
    const double n = static_cast<double>(s.n_atoms());
    std::fill(frac.begin(), frac.end(), 0.0);
    for (uint8_t z : s.species) {
      auto it = std::find(elems.begin(), elems.end(), z);
      frac[static_cast<size_t>(it - elems.begin())] += 1.0 / n;
    }
    for (size_t a = 0; a < k; ++a) {
      if (frac[a] == 0.0) continue;
      xty[a] += frac[a] * s.energy_per_atom;
      for (size_t b = 0; b < k; ++b) xtx[a * k + b] += frac[a] * frac[b];
    }
  }
  std::vector<size_t> dropped;
  std::vector<double> mu = num::solve_gepp_dropping(xtx, k, xty, 1e-10, &dropped);
  std::array<double, kNumElements> out;
  out.fill(std::numeric_limits<double>::quiet_NaN());
  for (size_t a = 0; a < k; ++a) out[elems[a]] = mu[a];
  for (size_t d : dropped) {
    out[elems[d]] = std::numeric_limits<double>::quiet_NaN();
    if (skipped) skipped->push_back(elems[d]);
  }
  return out;
}

}  // namespace

AlignResult align_energies(const std::vector<std::string>& files,
                           uint8_t ref_dataset_id,
                           const std::vector<std::string>& out_files) {
  require(files.size() >= 2, "align: need at least two datasets",
          ErrorCode::data);
  require(out_files.size() == files.size(), "align: out file count mismatch",
          ErrorCode::contract);

  std::vector<LoadedSet> sets;
  int ref_index = -1;
  for (const std::string& f : files) {
    LoadedSet s;
    s.path = f;
    s.samples = io::read_sample_file(f, &s.hdr);
    std::array<uint64_t, kNumElements> cnt{};
    for (const AtomisticSample& smp : s.samples)
      for (uint8_t z : smp.species) cnt[z]++;
    for (int e = 0; e < kNumElements; ++e)
      if (cnt[e] > 0) s.present.push_back(static_cast<uint8_t>(e));
    require(!s.samples.empty(), "align: empty dataset " + f, ErrorCode::data);
    if (s.hdr.dataset_id == ref_dataset_id) ref_index = int(sets.size());
    sets.push_back(std::move(s));
  }
  require(ref_index >= 0, "align: reference dataset not among inputs",
          ErrorCode::data);

  AlignResult res;
  for (LoadedSet& s : sets)
    res.offsets[s.hdr.dataset_id] = fit_offsets(s, &res.skipped_elements);

  const auto& mu_ref = res.offsets[ref_dataset_id];
  for (size_t si = 0; si < sets.size(); ++si) {
    LoadedSet& s = sets[si];
    const auto& mu_d = res.offsets[s.hdr.dataset_id];
    for (AtomisticSample& smp : s.samples) {
      const double n = static_cast<double>(smp.n_atoms());
      double corr = 0.0;
      for (uint8_t z : smp.species) {
        double d = std::isnan(mu_d[z]) ? 0.0 : mu_d[z];
        double r = std::isnan(mu_ref[z]) ? 0.0 : mu_ref[z];
        corr += (d - r) / n;
      }
      smp.energy_per_atom -= corr;
    }
    io::FileHeader hdr = s.hdr;
    hdr.aligned = 1;
    io::write_sample_file(out_files[si], hdr, s.samples);
  }
  return res;
}

// ---- statistics ----

ElementCounts element_frequency(const std::vector<std::string>& files) {
  ElementCounts counts;
  for (const std::string& f : files) {
    io::FileHeader hdr;
    std::vector<AtomisticSample> samples = io::read_sample_file(f, &hdr);
    auto& arr = counts[hdr.dataset_id];  // zero-initialized on first touch
    for (const AtomisticSample& s : samples)
      for (uint8_t z : s.species) arr[z]++;
  }
  return counts;
}

std::string element_frequency_csv(const ElementCounts& counts) {
  std::ostringstream os;
  os << "dataset,element,count\n";
  for (const auto& [dataset, arr] : counts)
    for (int e = 0; e < kNumElements; ++e)
      os << int(dataset) << "," << e << "," << arr[e] << "\n";
  return os.str();
}

}  // namespace hmtl::data
