#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "hmtl/dataset.hpp"
#include "hmtl/rng.hpp"
#include "hmtl/sample_io.hpp"
#include "oracles.hpp"

namespace data = hmtl::data;
namespace io = hmtl::io;
using hmtl::AtomisticSample;
using hmtl::Rng;

namespace {

std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "hmtl_test_data";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

data::DatasetSpec small_spec(uint8_t id, std::vector<uint8_t> elems,
                             uint64_t count, double alpha = 1.0,
                             double sigma = 0.0) {
  data::DatasetSpec s;
  s.name = "t" + std::to_string(id);
  s.dataset_id = id;
  s.elements = std::move(elems);
  s.n_min = 2;
  s.n_max = 6;
  s.alpha = alpha;
  s.sigma = sigma;
  s.count = count;
  return s;
}

}  // namespace

TEST_CASE("two atoms at the Morse minimum have ~zero force") {
  data::MorseParams p = data::morse_params(3, 5);
  std::vector<uint8_t> species = {3, 5};
  std::vector<double> pos = {0, 0, 0, p.r0, 0, 0};
  double e;
  std::vector<double> f;
  data::ground_truth(species, pos, &e, &f);
  for (double v : f) CHECK(std::fabs(v) < 1e-9);
  CHECK(e == doctest::Approx(-p.depth).epsilon(1e-12));
}

TEST_CASE("generator: identity transform gives ground-truth labels") {
  auto spec = small_spec(0, {0, 1, 2}, 20);
  auto samples = data::generate_dataset(spec, 42);
  REQUIRE(samples.size() == 20);
  for (const auto& s : samples) {
    double e;
    std::vector<double> f;
    data::ground_truth(s.species, s.positions, &e, &f);
    CHECK(s.energy_per_atom ==
          doctest::Approx(e / double(s.n_atoms())).epsilon(1e-12));
    for (size_t i = 0; i < f.size(); ++i)
      CHECK(s.forces[i] == doctest::Approx(f[i]).epsilon(1e-12));
  }
}

TEST_CASE("generator: analytic forces match finite differences of energy") {
  auto spec = small_spec(1, {0, 4, 7}, 8);
  auto samples = data::generate_dataset(spec, 7);
  for (const auto& s : samples) {
    std::vector<double> pos = s.positions;
    auto energy_at = [&]() {
      double e;
      std::vector<double> f;
      data::ground_truth(s.species, pos, &e, &f);
      return e;
    };
    double e0;
    std::vector<double> f0;
    data::ground_truth(s.species, pos, &e0, &f0);
    auto fd = oracle::fd_gradient(energy_at, pos, 1e-6);
    for (size_t i = 0; i < fd.size(); ++i)
      CHECK(std::fabs(-fd[i] - f0[i]) < 1e-7);
  }
}

TEST_CASE("generator: fidelity transform applies alpha, mu, sigma") {
  auto spec = small_spec(2, {1, 2}, 30, 1.5, 0.0);
  spec.mu[1] = 2.0;
  spec.mu[2] = -1.0;
  auto samples = data::generate_dataset(spec, 9);
  for (const auto& s : samples) {
    double e;
    std::vector<double> f;
    data::ground_truth(s.species, s.positions, &e, &f);
    double n = double(s.n_atoms());
    double want = 1.5 * e / n;
    for (uint8_t z : s.species) want += spec.mu[z] / n;
    CHECK(s.energy_per_atom == doctest::Approx(want).epsilon(1e-12));
    for (size_t i = 0; i < f.size(); ++i)
      CHECK(s.forces[i] == doctest::Approx(1.5 * f[i]).epsilon(1e-12));
  }
}

TEST_CASE("structure_seed clones configurations across specs") {
  auto a = small_spec(0, {0, 1}, 15);
  auto b = small_spec(1, {0, 1}, 15, 1.0, 0.0);
  a.structure_seed = 77;
  b.structure_seed = 77;
  b.mu[0] = 3.0;
  auto sa = data::generate_dataset(a, 1);
  auto sb = data::generate_dataset(b, 2);
  REQUIRE(sa.size() == sb.size());
  for (size_t i = 0; i < sa.size(); ++i) {
    REQUIRE(sa[i].n_atoms() == sb[i].n_atoms());
    for (size_t j = 0; j < sa[i].positions.size(); ++j)
      CHECK(sa[i].positions[j] == sb[i].positions[j]);
    for (size_t j = 0; j < sa[i].species.size(); ++j)
      CHECK(sa[i].species[j] == sb[i].species[j]);
  }
}

TEST_CASE("sample file round-trip is bit-identical") {
  auto spec = small_spec(3, {0, 5, 9}, 25);
  auto samples = data::generate_dataset(spec, 11);
  std::string path = tmp_path("roundtrip.hmtd");
  io::FileHeader hdr;
  hdr.dataset_id = 3;
  io::write_sample_file(path, hdr, samples);
  io::FileHeader back_hdr;
  auto back = io::read_sample_file(path, &back_hdr);
  CHECK(back_hdr.dataset_id == 3);
  CHECK(back_hdr.aligned == 0);
  REQUIRE(back.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].species == samples[i].species);
    CHECK(back[i].dataset_id == samples[i].dataset_id);
    // bit-exact doubles
    for (size_t j = 0; j < samples[i].positions.size(); ++j)
      CHECK(back[i].positions[j] == samples[i].positions[j]);
    for (size_t j = 0; j < samples[i].forces.size(); ++j)
      CHECK(back[i].forces[j] == samples[i].forces[j]);
    CHECK(back[i].energy_per_atom == samples[i].energy_per_atom);
  }
}

TEST_CASE("corrupt record is rejected by CRC") {
  auto spec = small_spec(4, {0}, 3);
  auto samples = data::generate_dataset(spec, 13);
  std::string path = tmp_path("corrupt.hmtd");
  io::FileHeader hdr;
  hdr.dataset_id = 4;
  io::write_sample_file(path, hdr, samples);
  // flip one payload byte
  FILE* f = std::fopen(path.c_str(), "rb+");
  REQUIRE(f != nullptr);
  std::fseek(f, 40, SEEK_SET);
  int c = std::fgetc(f);
  std::fseek(f, 40, SEEK_SET);
  std::fputc(c ^ 0x40, f);
  std::fclose(f);
  CHECK_THROWS_AS((void)io::read_sample_file(path), hmtl::Error);
}

TEST_CASE("alignment: dataset identical to reference stays unchanged") {
  auto spec = small_spec(0, {0, 1, 2}, 60);
  std::string p0 = tmp_path("ref_only0.hmtd");
  std::string p1 = tmp_path("ref_only1.hmtd");
  data::generate_to_file(spec, 21, p0);
  auto spec1 = small_spec(1, {0, 1, 2}, 60);
  spec1.structure_seed = 21;
  data::generate_to_file(spec1, 22, p1);

  auto before = io::read_sample_file(p0);
  std::string o0 = tmp_path("ref_only0.aligned.hmtd");
  std::string o1 = tmp_path("ref_only1.aligned.hmtd");
  data::align_energies({p0, p1}, 0, {o0, o1});
  io::FileHeader h;
  auto after = io::read_sample_file(o0, &h);
  CHECK(h.aligned == 1);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(std::fabs(after[i].energy_per_atom - before[i].energy_per_atom) <
          1e-10);
}

TEST_CASE("alignment recovers planted offsets on cloned structures, sigma=0") {
  // identical configurations, labels differ only by planted mu
  auto ref = small_spec(0, {0, 1, 2}, 200);
  ref.structure_seed = 5;
  auto other = small_spec(1, {0, 1, 2}, 200);
  other.structure_seed = 5;
  other.mu[0] = 1.25;
  other.mu[1] = -0.75;
  other.mu[2] = 2.5;

  std::string p0 = tmp_path("plant0.hmtd"), p1 = tmp_path("plant1.hmtd");
  data::generate_to_file(ref, 31, p0);
  data::generate_to_file(other, 32, p1);
  std::string o0 = tmp_path("plant0.a.hmtd"), o1 = tmp_path("plant1.a.hmtd");
  auto res = data::align_energies({p0, p1}, 0, {o0, o1});

  // recovered offsets are identifiable relative to the reference fit
  const auto& mu_ref = res.offsets.at(0);
  const auto& mu_d = res.offsets.at(1);
  CHECK(std::fabs((mu_d[0] - mu_ref[0]) - 1.25) < 1e-8);
  CHECK(std::fabs((mu_d[1] - mu_ref[1]) - (-0.75)) < 1e-8);
  CHECK(std::fabs((mu_d[2] - mu_ref[2]) - 2.5) < 1e-8);

  // aligned labels of the offset dataset match the reference labels exactly
  auto a0 = io::read_sample_file(o0);
  auto a1 = io::read_sample_file(o1);
  for (size_t i = 0; i < a0.size(); ++i)
    CHECK(std::fabs(a1[i].energy_per_atom - a0[i].energy_per_atom) < 1e-8);
}

TEST_CASE("alignment recovery within statistical bound at sigma=0.01") {
  auto ref = small_spec(0, {0, 1}, 400);
  ref.structure_seed = 6;
  auto other = small_spec(1, {0, 1}, 400, 1.0, 0.01);
  other.structure_seed = 6;
  other.mu[0] = 0.8;
  other.mu[1] = -0.4;
  std::string p0 = tmp_path("noise0.hmtd"), p1 = tmp_path("noise1.hmtd");
  data::generate_to_file(ref, 41, p0);
  data::generate_to_file(other, 42, p1);
  std::string o0 = tmp_path("noise0.a.hmtd"), o1 = tmp_path("noise1.a.hmtd");
  auto res = data::align_energies({p0, p1}, 0, {o0, o1});
  const auto& mu_ref = res.offsets.at(0);
  const auto& mu_d = res.offsets.at(1);
  // ~400 samples with both elements present; 3 sigma / sqrt(n) headroom
  double bound = 3.0 * 0.01 / std::sqrt(400.0) * 10.0;
  CHECK(std::fabs((mu_d[0] - mu_ref[0]) - 0.8) < bound);
  CHECK(std::fabs((mu_d[1] - mu_ref[1]) - (-0.4)) < bound);
}

TEST_CASE("alignment idempotence") {
  auto a = small_spec(0, {0, 1, 2}, 120);
  auto b = small_spec(1, {1, 2, 3}, 120, 0.8);
  b.mu[1] = 1.0;
  b.mu[2] = -2.0;
  std::string p0 = tmp_path("idem0.hmtd"), p1 = tmp_path("idem1.hmtd");
  data::generate_to_file(a, 51, p0);
  data::generate_to_file(b, 52, p1);
  std::string o0 = tmp_path("idem0.a.hmtd"), o1 = tmp_path("idem1.a.hmtd");
  data::align_energies({p0, p1}, 0, {o0, o1});
  std::string q0 = tmp_path("idem0.b.hmtd"), q1 = tmp_path("idem1.b.hmtd");
  data::align_energies({o0, o1}, 0, {q0, q1});
  auto once = io::read_sample_file(o1);
  auto twice = io::read_sample_file(q1);
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(std::fabs(once[i].energy_per_atom - twice[i].energy_per_atom) <
          1e-9);
}

TEST_CASE("element frequency counts and CSV") {
  AtomisticSample s;
  s.species = {1, 1, 2};
  s.positions = {0, 0, 0, 2, 0, 0, 0, 2, 0};
  s.forces = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  s.dataset_id = 7;
  std::string p = tmp_path("freq.hmtd");
  io::FileHeader hdr;
  hdr.dataset_id = 7;
  io::write_sample_file(p, hdr, {s});
  auto counts = data::element_frequency({p});
  CHECK(counts.at(7)[1] == 2);
  CHECK(counts.at(7)[2] == 1);
  CHECK(counts.at(7)[0] == 0);

  // counts sum equals total atom count
  uint64_t total = 0;
  for (auto c : counts.at(7)) total += c;
  CHECK(total == 3);

  auto csv = data::element_frequency_csv(counts);
  CHECK(csv.find("dataset,element,count") == 0);
  CHECK(csv.find("7,1,2") != std::string::npos);
}

TEST_CASE("empty dataset gives all-zero counts") {
  std::string p = tmp_path("empty.hmtd");
  io::FileHeader hdr;
  hdr.dataset_id = 9;
  io::write_sample_file(p, hdr, {});
  auto counts = data::element_frequency({p});
  for (auto c : counts.at(9)) CHECK(c == 0);
}

TEST_CASE("counts sum over elements equals sum of atom counts (random)") {
  auto spec = small_spec(5, {2, 3, 4, 5}, 40);
  std::string p = tmp_path("sumcheck.hmtd");
  data::generate_to_file(spec, 61, p);
  auto samples = io::read_sample_file(p);
  uint64_t atoms = 0;
  for (const auto& s : samples) atoms += s.n_atoms();
  auto counts = data::element_frequency({p});
  uint64_t total = 0;
  for (auto c : counts.at(5)) total += c;
  CHECK(total == atoms);
}

TEST_CASE("default5 specs parse back from json") {
  std::string p = tmp_path("default5.json");
  {
    std::FILE* f = std::fopen(p.c_str(), "w");
    auto j = data::default5_spec_json();
    std::fwrite(j.data(), 1, j.size(), f);
    std::fclose(f);
  }
  auto specs = data::parse_spec_json(p);
  REQUIRE(specs.size() == 5);
  auto ref = data::default5_specs();
  for (size_t i = 0; i < 5; ++i) {
    CHECK(specs[i].dataset_id == ref[i].dataset_id);
    CHECK(specs[i].alpha == ref[i].alpha);
    CHECK(specs[i].elements == ref[i].elements);
    for (int e = 0; e < data::kNumElements; ++e)
      CHECK(specs[i].mu[e] == doctest::Approx(ref[i].mu[e]));
  }
}

TEST_CASE("generator determinism: same seed, same bytes") {
  auto spec = small_spec(6, {0, 1}, 10);
  auto s1 = data::generate_dataset(spec, 99);
  auto s2 = data::generate_dataset(spec, 99);
  REQUIRE(s1.size() == s2.size());
  for (size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i].energy_per_atom == s2[i].energy_per_atom);
    for (size_t j = 0; j < s1[i].positions.size(); ++j)
      CHECK(s1[i].positions[j] == s2[i].positions[j]);
  }
}
