#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmtl/graph.hpp"
#include "hmtl/sample_io.hpp"

namespace hmtl::data {

constexpr int kNumElements = 20;  // synthetic "periodic table"

// One synthetic source: which elements it covers, how large its structures
// are, and the fidelity transform applied to the ground-truth labels:
//   E_label = alpha * E_true/n + sum_e count_e * mu_e / n + noise(sigma)
//   F_label = alpha * F_true + noise(sigma)
struct DatasetSpec {
  std::string name;
  uint8_t dataset_id = 0;
  std::vector<uint8_t> elements;
  int n_min = 2, n_max = 8;
  double alpha = 1.0;
  std::array<double, kNumElements> mu{};  // per-element reference offset
  double sigma = 0.0;
  uint64_t count = 1000;
  // when >= 0, structures are drawn from this structure seed instead of the
  // dataset's own stream, so two specs can label identical configurations
  int64_t structure_seed = -1;
};

std::vector<DatasetSpec> parse_spec_json(const std::string& path);
std::string default5_spec_json();
std::vector<DatasetSpec> default5_specs();

// Morse pair potential, parameters keyed on the (unordered) species pair.
struct MorseParams {
  double depth, width, r0;
};
MorseParams morse_params(uint8_t ea, uint8_t eb);
double morse_energy(double r, const MorseParams& p);
double morse_dEdr(double r, const MorseParams& p);

// Ground-truth labels for a configuration: E = sum_{i<j} Morse(d_ij),
// F = -grad E (exact analytic).
void ground_truth(const std::vector<uint8_t>& species,
                  const std::vector<double>& positions, double* energy,
                  std::vector<double>* forces);

// Generates `spec.count` samples. Atoms are placed uniformly in a box with
// minimum-separation rejection (d_min = 0.8); box side scales with cbrt(n).
std::vector<AtomisticSample> generate_dataset(const DatasetSpec& spec,
                                              uint64_t seed);

void generate_to_file(const DatasetSpec& spec, uint64_t seed,
                      const std::string& out_path);

// Per-dataset least-squares fit of per-atom energies against per-atom
// element fractions; labels are re-leveled to the reference dataset's fit.
struct AlignResult {
  // recovered offsets mu_hat[dataset_id][element]; absent elements are NaN
  std::map<uint8_t, std::array<double, kNumElements>> offsets;
  std::vector<uint8_t> skipped_elements;  // rank-deficient columns, if any
};

AlignResult align_energies(const std::vector<std::string>& files,
                           uint8_t ref_dataset_id,
                           const std::vector<std::string>& out_files);

// Occurrence counts per element per dataset.
using ElementCounts = std::map<uint8_t, std::array<uint64_t, kNumElements>>;
ElementCounts element_frequency(const std::vector<std::string>& files);
std::string element_frequency_csv(const ElementCounts& counts);

}  // namespace hmtl::data
