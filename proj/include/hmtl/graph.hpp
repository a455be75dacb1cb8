#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hmtl/error.hpp"

namespace hmtl {

// One atomistic structure: a small graph with per-node positions/species,
// an energy-per-atom label and per-atom force labels.
struct AtomisticSample {
  std::vector<uint8_t> species;     // element index per atom
  std::vector<double> positions;    // 3 per atom
  std::vector<double> forces;       // 3 per atom
  double energy_per_atom = 0.0;
  uint8_t dataset_id = 0;

  size_t n_atoms() const { return species.size(); }
};

// A batch of graphs, concatenated. Edges are directed with both directions
// present, no self-edges, built within the cutoff radius; edge e carries
// (dst, src) and is sorted by (dst, src) ascending, which groups edges by
// graph and fixes the aggregation order.
template <typename S>
struct GraphBatchT {
  int n_graphs = 0;
  std::vector<int> graph_offset;     // size n_graphs+1, node ranges
  std::vector<int> edge_offset;      // size n_graphs+1, edge ranges
  std::vector<S> positions;          // 3 per node
  std::vector<uint8_t> species;      // per node
  std::vector<int> edge_dst, edge_src;
  std::vector<uint8_t> dataset_id;   // per graph
  std::vector<S> label_energy;       // per graph (energy per atom)
  std::vector<S> label_force;        // 3 per node

  int n_nodes() const { return static_cast<int>(species.size()); }
  int n_edges() const { return static_cast<int>(edge_dst.size()); }
  int graph_nodes(int g) const { return graph_offset[g + 1] - graph_offset[g]; }
};

// Brute-force O(n^2) neighbor search per graph; samples stay small (<= 64
// atoms) so cell lists are unnecessary.
template <typename S>
GraphBatchT<S> build_batch(const std::vector<AtomisticSample>& samples,
                           double cutoff) {
  GraphBatchT<S> b;
  b.n_graphs = static_cast<int>(samples.size());
  b.graph_offset.push_back(0);
  b.edge_offset.push_back(0);
  const double rc2 = cutoff * cutoff;
  for (const AtomisticSample& s : samples) {
    const int n = static_cast<int>(s.n_atoms());
    require(n >= 1, "build_batch: empty graph rejected");
    const int base = b.n_nodes();
    for (int i = 0; i < n; ++i) {
      b.species.push_back(s.species[i]);
      for (int k = 0; k < 3; ++k) {
        b.positions.push_back(static_cast<S>(s.positions[3 * i + k]));
        b.label_force.push_back(static_cast<S>(s.forces[3 * i + k]));
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        double dx = s.positions[3 * i] - s.positions[3 * j];
        double dy = s.positions[3 * i + 1] - s.positions[3 * j + 1];
        double dz = s.positions[3 * i + 2] - s.positions[3 * j + 2];
        if (dx * dx + dy * dy + dz * dz <= rc2) {
          b.edge_dst.push_back(base + i);
          b.edge_src.push_back(base + j);
        }
      }
    }
    b.graph_offset.push_back(base + n);
    b.edge_offset.push_back(b.n_edges());
    b.dataset_id.push_back(s.dataset_id);
    b.label_energy.push_back(static_cast<S>(s.energy_per_atom));
  }
  return b;
}

}  // namespace hmtl
