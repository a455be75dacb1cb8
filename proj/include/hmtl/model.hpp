#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmtl/graph.hpp"
#include "hmtl/kernels.hpp"
#include "hmtl/rng.hpp"

namespace hmtl {

// Hyperparameters of the two-level hierarchical MTL model: a shared
// distance-conditioned message-passing encoder feeding one branch per
// dataset, each branch an energy MLP plus a force MLP.
struct ModelHyper {
  int n_species = 20;
  int layers = 2;       // encoder message-passing rounds
  int hidden = 32;      // encoder width H
  int head_width = 32;  // branch MLP width
  int head_depth = 3;   // linear layers per branch MLP
  int n_heads = 1;
  double cutoff = 5.0;

  // configuration used for the large-scale runs: 4 x 866 encoder,
  // 3-layer 889-unit heads
  static ModelHyper paper_preset(int n_heads) {
    ModelHyper hp;
    hp.layers = 4;
    hp.hidden = 866;
    hp.head_width = 889;
    hp.head_depth = 3;
    hp.n_heads = n_heads;
    return hp;
  }
};

// Named tensors mapped into one flat parameter block.
struct BlockLayout {
  struct Entry {
    std::string name;
    size_t rows, cols, offset;
  };
  std::vector<Entry> entries;
  size_t total = 0;

  void add(const std::string& name, size_t rows, size_t cols) {
    entries.push_back({name, rows, cols, total});
    total += rows * cols;
  }
};

// Shared block: species embedding + per layer the edge MLP (phi_e) and the
// node-update MLP (phi_h).
inline BlockLayout shared_layout(const ModelHyper& hp) {
  BlockLayout L;
  const size_t H = hp.hidden;
  L.add("embed", hp.n_species, H);
  for (int l = 0; l < hp.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    L.add(p + "edge.W1", 2 * H + 1, H);
    L.add(p + "edge.b1", 1, H);
    L.add(p + "edge.W2", H, H);
    L.add(p + "edge.b2", 1, H);
    L.add(p + "node.W1", 2 * H, H);
    L.add(p + "node.b1", 1, H);
    L.add(p + "node.W2", H, H);
    L.add(p + "node.b2", 1, H);
  }
  return L;
}

// One branch: energy MLP over the pooled graph embedding (H -> W -> ... -> 1)
// and force MLP psi over [h_i + h_j, d_ij] ((H+1) -> W -> ... -> 1).
inline BlockLayout head_layout(const ModelHyper& hp) {
  BlockLayout L;
  auto mlp = [&](const std::string& p, size_t in_dim) {
    size_t in = in_dim;
    for (int i = 0; i < hp.head_depth; ++i) {
      size_t out = (i == hp.head_depth - 1) ? 1 : size_t(hp.head_width);
      L.add(p + ".W" + std::to_string(i), in, out);
      L.add(p + ".b" + std::to_string(i), 1, out);
      in = out;
    }
  };
  mlp("energy", hp.hidden);
  mlp("force", hp.hidden + 1);
  return L;
}

template <typename S>
struct PredictionT {
  std::vector<S> energy_per_atom;  // per graph
  std::vector<S> forces;           // 3 per node
};

template <typename S>
struct GradientBufferT {
  std::vector<S> shared;
  std::map<int, std::vector<S>> heads;  // only locally owned heads

  void scale(S f) {
    for (S& v : shared) v *= f;
    for (auto& [k, h] : heads)
      for (S& v : h) v *= f;
  }
  void accumulate(const GradientBufferT& o) {
    for (size_t i = 0; i < shared.size(); ++i) shared[i] += o.shared[i];
    for (auto& [k, h] : heads) {
      const auto& oh = o.heads.at(k);
      for (size_t i = 0; i < h.size(); ++i) h[i] += oh[i];
    }
  }
};

namespace detail {

template <typename S>
struct MlpCache {
  std::vector<std::vector<S>> z;  // pre-activation per layer
  std::vector<std::vector<S>> a;  // input of each layer (a[0] = mlp input)
};

template <typename S>
struct LayerCache {
  std::vector<S> h_in;              // nodes x H
  std::vector<S> u, z1, a1, z2, m;  // edge path
  std::vector<S> v, vz1, vp1;       // node path
};

template <typename S>
struct HeadCache {
  std::vector<int> graphs;       // graph indices routed to this head
  std::vector<int> edges;        // edge indices of those graphs
  std::vector<S> pooled;         // |graphs| x H
  MlpCache<S> energy;
  MlpCache<S> force;
  std::vector<S> s;              // per selected edge
};

}  // namespace detail

template <typename S>
struct ForwardCacheT {
  std::vector<S> d2, d;     // per edge: squared distance, distance
  std::vector<S> dvec;      // per edge: x_dst - x_src (3)
  std::vector<detail::LayerCache<S>> layers;
  std::vector<S> h_final;   // nodes x H
  std::map<int, detail::HeadCache<S>> heads;
};

// The model proper. A rank owns the shared block plus some subset of head
// blocks: all of them in base/serial mode, exactly one in taskpar mode.
template <typename S>
class ModelT {
public:
  ModelT(const ModelHyper& hp, uint64_t seed, std::vector<int> owned_heads)
      : hp_(hp),
        shared_layout_(shared_layout(hp)),
        head_layout_(head_layout(hp)) {
    shared_ = init_block_(shared_layout_, seed_stream(seed, 0), true);
    for (int k : owned_heads) {
      require(k >= 0 && k < hp.n_heads, "model: head index out of range");
      heads_[k] = init_block_(head_layout_, seed_stream(seed, 1 + k), false);
    }
  }

  const ModelHyper& hyper() const { return hp_; }
  size_t shared_size() const { return shared_layout_.total; }
  size_t head_size() const { return head_layout_.total; }
  int n_owned_heads() const { return static_cast<int>(heads_.size()); }
  bool owns_head(int k) const { return heads_.count(k) > 0; }

  // exact per-rank parameter census (what the memory formulas must equal)
  size_t param_count() const {
    size_t n = shared_.size();
    for (const auto& [k, h] : heads_) n += h.size();
    return n;
  }

  std::vector<S>& shared_block() { return shared_; }
  const std::vector<S>& shared_block() const { return shared_; }
  std::vector<S>& head_block(int k) { return heads_.at(k); }
  const std::vector<S>& head_block(int k) const { return heads_.at(k); }
  std::map<int, std::vector<S>>& head_blocks() { return heads_; }
  const std::map<int, std::vector<S>>& head_blocks() const { return heads_; }

  GradientBufferT<S> zero_grads() const {
    GradientBufferT<S> g;
    g.shared.assign(shared_.size(), S(0));
    for (const auto& [k, h] : heads_) g.heads[k].assign(h.size(), S(0));
    return g;
  }

  PredictionT<S> forward(const GraphBatchT<S>& batch,
                         ForwardCacheT<S>* cache) const;
  GradientBufferT<S> backward(const GraphBatchT<S>& batch,
                              const ForwardCacheT<S>& cache,
                              const std::vector<S>& d_energy,
                              const std::vector<S>& d_forces) const;

private:
  const S* shared_at_(size_t i) const {
    return shared_.data() + shared_layout_.entries[i].offset;
  }
  const S* head_at_(int k, size_t i) const {
    return heads_.at(k).data() + head_layout_.entries[i].offset;
  }

  std::vector<S> init_block_(const BlockLayout& layout, uint64_t seed,
                             bool is_shared) const {
    std::vector<S> block(layout.total, S(0));
    Rng rng(seed);
    for (const auto& e : layout.entries) {
      S* p = block.data() + e.offset;
      if (e.name.find(".b") != std::string::npos) continue;  // biases zero
      double s = (is_shared && e.name == "embed")
                     ? 0.5
                     : 1.0 / std::sqrt(static_cast<double>(e.rows));
      for (size_t i = 0; i < e.rows * e.cols; ++i)
        p[i] = static_cast<S>(rng.uniform(-s, s));
    }
    return block;
  }

  // head-MLP forward: rows x in_dim input, scalar output per row
  void mlp_forward_(const S* block, const std::string& prefix, const S* x,
                    size_t rows, size_t in_dim, detail::MlpCache<S>* mc,
                    std::vector<S>* out) const;
  // accumulates parameter grads; returns d(input)
  std::vector<S> mlp_backward_(const S* block, S* grad_block,
                               const std::string& prefix, size_t in_dim,
                               const detail::MlpCache<S>& mc,
                               const std::vector<S>& d_out) const;
  const BlockLayout::Entry& head_entry_(const std::string& name) const;

  ModelHyper hp_;
  BlockLayout shared_layout_, head_layout_;
  std::vector<S> shared_;
  std::map<int, std::vector<S>> heads_;
};

// ---- partitioning ops ----

enum class ParallelRegime { case1, case2, case3 };

// Threshold 10 realizes the ">>" of the three-regime classification.
inline ParallelRegime classify_regime(size_t p_s, size_t p_h, int n_h) {
  require(p_s > 0 && p_h > 0 && n_h > 0, "classify_regime: positive counts");
  const double nhph = double(n_h) * double(p_h);
  if (double(p_s) >= 10.0 * nhph) return ParallelRegime::case1;
  if (nhph >= 10.0 * double(p_s)) return ParallelRegime::case2;
  return ParallelRegime::case3;
}

enum class RunMode { serial, base, taskpar };

// Per-rank parameter count: P_s + N_h*P_h replicated, P_s + P_h partitioned.
inline size_t memory_footprint(size_t p_s, size_t p_h, int n_h, RunMode mode) {
  if (mode == RunMode::taskpar) return p_s + p_h;
  return p_s + static_cast<size_t>(n_h) * p_h;
}

// ---- checkpoint io (magic "HMTP") ----

void save_checkpoint(const std::string& path, const ModelHyper& hp,
                     const std::vector<double>& shared,
                     const std::vector<std::vector<double>>& heads);
ModelT<double> load_checkpoint(const std::string& path);

// ================= implementation =================

template <typename S>
const BlockLayout::Entry& ModelT<S>::head_entry_(
    const std::string& name) const {
  for (const auto& e : head_layout_.entries)
    if (e.name == name) return e;
  fail(ErrorCode::internal, "no head entry " + name);
}

template <typename S>
void ModelT<S>::mlp_forward_(const S* block, const std::string& prefix,
                             const S* x, size_t rows, size_t in_dim,
                             detail::MlpCache<S>* mc,
                             std::vector<S>* out) const {
  mc->z.assign(hp_.head_depth, {});
  mc->a.assign(hp_.head_depth, {});
  std::vector<S> cur(x, x + rows * in_dim);
  size_t in = in_dim;
  for (int i = 0; i < hp_.head_depth; ++i) {
    const auto& we = head_entry_(prefix + ".W" + std::to_string(i));
    const auto& be = head_entry_(prefix + ".b" + std::to_string(i));
    const size_t out_dim = we.cols;
    mc->a[i] = cur;
    std::vector<S> z(rows * out_dim);
    num::linear_forward_span(cur.data(), rows, in, block + we.offset, out_dim,
                             block + be.offset, z.data());
    mc->z[i] = z;
    if (i + 1 < hp_.head_depth)
      num::activation_forward_span(z.data(), z.size(), z.data());
    cur = std::move(z);
    in = out_dim;
  }
  *out = std::move(cur);
}

template <typename S>
std::vector<S> ModelT<S>::mlp_backward_(const S* block, S* grad_block,
                                        const std::string& prefix,
                                        size_t in_dim,
                                        const detail::MlpCache<S>& mc,
                                        const std::vector<S>& d_out) const {
  std::vector<S> up = d_out;
  for (int i = hp_.head_depth - 1; i >= 0; --i) {
    const auto& we = head_entry_(prefix + ".W" + std::to_string(i));
    const auto& be = head_entry_(prefix + ".b" + std::to_string(i));
    const size_t out_dim = we.cols;
    const size_t in = we.rows;
    const size_t rows = mc.z[i].size() / out_dim;
    if (i + 1 < hp_.head_depth) {
      // up currently refers to post-activation output of layer i
      std::vector<S> dz(up.size());
      num::activation_backward_span(mc.z[i].data(), up.data(), up.size(),
                                    dz.data());
      up = std::move(dz);
    }
    std::vector<S> dx(rows * in);
    num::linear_backward_span(mc.a[i].data(), rows, in, block + we.offset,
                              out_dim, up.data(), grad_block + we.offset,
                              grad_block + be.offset, dx.data());
    up = std::move(dx);
  }
  require(up.size() % in_dim == 0, "mlp_backward: dim bookkeeping");
  return up;
}

template <typename S>
PredictionT<S> ModelT<S>::forward(const GraphBatchT<S>& batch,
                                  ForwardCacheT<S>* cache) const {
  require(batch.n_graphs > 0 && batch.n_nodes() > 0,
          "model: empty batch rejected");
  for (int g = 0; g < batch.n_graphs; ++g)
    require(batch.graph_nodes(g) > 0, "model: empty graph rejected");
  for (uint8_t d : batch.dataset_id)
    require(owns_head(d), "model: unknown dataset id " + std::to_string(d) +
                              " (head not owned by this rank)");

  const size_t H = hp_.hidden;
  const size_t N = batch.n_nodes();
  const size_t E = batch.n_edges();
  ForwardCacheT<S>& c = *cache;

  c.d2.resize(E);
  c.d.resize(E);
  c.dvec.resize(3 * E);
  for (size_t e = 0; e < E; ++e) {
    const S* pi = batch.positions.data() + 3 * batch.edge_dst[e];
    const S* pj = batch.positions.data() + 3 * batch.edge_src[e];
    S dx = pi[0] - pj[0], dy = pi[1] - pj[1], dz = pi[2] - pj[2];
    c.dvec[3 * e] = dx;
    c.dvec[3 * e + 1] = dy;
    c.dvec[3 * e + 2] = dz;
    c.d2[e] = dx * dx + dy * dy + dz * dz;
    c.d[e] = std::sqrt(c.d2[e]);
  }

  const auto& SL = shared_layout_.entries;
  const S* embed = shared_at_(0);
  std::vector<S> h(N * H);
  for (size_t i = 0; i < N; ++i)
    for (size_t k = 0; k < H; ++k) h[i * H + k] = embed[batch.species[i] * H + k];

  c.layers.assign(hp_.layers, {});
  for (int l = 0; l < hp_.layers; ++l) {
    detail::LayerCache<S>& lc = c.layers[l];
    lc.h_in = h;
    const size_t base = 1 + 8 * static_cast<size_t>(l);
    const S* eW1 = shared_.data() + SL[base + 0].offset;
    const S* eb1 = shared_.data() + SL[base + 1].offset;
    const S* eW2 = shared_.data() + SL[base + 2].offset;
    const S* eb2 = shared_.data() + SL[base + 3].offset;
    const S* nW1 = shared_.data() + SL[base + 4].offset;
    const S* nb1 = shared_.data() + SL[base + 5].offset;
    const S* nW2 = shared_.data() + SL[base + 6].offset;
    const S* nb2 = shared_.data() + SL[base + 7].offset;

    // m_ij = phi_e(h_i, h_j, d_ij^2), i = receiving node
    lc.u.resize(E * (2 * H + 1));
    for (size_t e = 0; e < E; ++e) {
      S* ue = lc.u.data() + e * (2 * H + 1);
      const S* hd = h.data() + batch.edge_dst[e] * H;
      const S* hs = h.data() + batch.edge_src[e] * H;
      for (size_t k = 0; k < H; ++k) ue[k] = hd[k];
      for (size_t k = 0; k < H; ++k) ue[H + k] = hs[k];
      ue[2 * H] = c.d2[e];
    }
    lc.z1.resize(E * H);
    num::linear_forward_span(lc.u.data(), E, 2 * H + 1, eW1, H, eb1,
                             lc.z1.data());
    lc.a1.resize(E * H);
    num::activation_forward_span(lc.z1.data(), lc.z1.size(), lc.a1.data());
    lc.z2.resize(E * H);
    num::linear_forward_span(lc.a1.data(), E, H, eW2, H, eb2, lc.z2.data());
    lc.m.resize(E * H);
    num::activation_forward_span(lc.z2.data(), lc.z2.size(), lc.m.data());

    // h_i' = h_i + phi_h(h_i, sum_j m_ij)
    std::vector<S> agg(N * H);
    num::segment_sum_span(lc.m.data(), E, H, batch.edge_dst.data(), N,
                          agg.data());
    lc.v.resize(N * 2 * H);
    for (size_t i = 0; i < N; ++i) {
      S* vi = lc.v.data() + i * 2 * H;
      for (size_t k = 0; k < H; ++k) vi[k] = h[i * H + k];
      for (size_t k = 0; k < H; ++k) vi[H + k] = agg[i * H + k];
    }
    lc.vz1.resize(N * H);
    num::linear_forward_span(lc.v.data(), N, 2 * H, nW1, H, nb1,
                             lc.vz1.data());
    lc.vp1.resize(N * H);
    num::activation_forward_span(lc.vz1.data(), lc.vz1.size(),
                                 lc.vp1.data());
    std::vector<S> q(N * H);
    num::linear_forward_span(lc.vp1.data(), N, H, nW2, H, nb2, q.data());
    for (size_t i = 0; i < N * H; ++i) h[i] += q[i];
  }
  c.h_final = h;

  // route graphs to branches by dataset id
  c.heads.clear();
  for (int g = 0; g < batch.n_graphs; ++g)
    c.heads[batch.dataset_id[g]].graphs.push_back(g);

  PredictionT<S> pred;
  pred.energy_per_atom.assign(batch.n_graphs, S(0));
  pred.forces.assign(3 * N, S(0));

  for (auto& [k, hc] : c.heads) {
    const S* block = heads_.at(k).data();
    const size_t G = hc.graphs.size();

    // energy branch: per-graph mean pool -> MLP -> energy per atom
    hc.pooled.assign(G * H, S(0));
    for (size_t gi = 0; gi < G; ++gi) {
      int g = hc.graphs[gi];
      const int lo = batch.graph_offset[g], hi = batch.graph_offset[g + 1];
      for (int i = lo; i < hi; ++i)
        for (size_t kk = 0; kk < H; ++kk)
          hc.pooled[gi * H + kk] += h[i * H + kk];
      const S inv = S(1) / S(hi - lo);
      for (size_t kk = 0; kk < H; ++kk) hc.pooled[gi * H + kk] *= inv;
    }
    std::vector<S> e_out;
    mlp_forward_(block, "energy", hc.pooled.data(), G, H, &hc.energy, &e_out);
    for (size_t gi = 0; gi < G; ++gi)
      pred.energy_per_atom[hc.graphs[gi]] = e_out[gi];

    // force branch: symmetric edge scalar s_ij = psi(h_i + h_j, d_ij),
    // F_i = sum_j (x_i - x_j) * s_ij
    for (int g : hc.graphs)
      for (int e = batch.edge_offset[g]; e < batch.edge_offset[g + 1]; ++e)
        hc.edges.push_back(e);
    const size_t Ek = hc.edges.size();
    std::vector<S> psi_in(Ek * (H + 1));
    for (size_t ei = 0; ei < Ek; ++ei) {
      const int e = hc.edges[ei];
      const S* hd = h.data() + batch.edge_dst[e] * H;
      const S* hs = h.data() + batch.edge_src[e] * H;
      S* pe = psi_in.data() + ei * (H + 1);
      for (size_t kk = 0; kk < H; ++kk) pe[kk] = hd[kk] + hs[kk];
      pe[H] = c.d[e];
    }
    mlp_forward_(block, "force", psi_in.data(), Ek, H + 1, &hc.force, &hc.s);
    for (size_t ei = 0; ei < Ek; ++ei) {
      const int e = hc.edges[ei];
      const int i = batch.edge_dst[e];
      for (int kk = 0; kk < 3; ++kk)
        pred.forces[3 * i + kk] += c.dvec[3 * e + kk] * hc.s[ei];
    }
  }

  for (S v : pred.energy_per_atom)
    require(std::isfinite(double(v)), "model: non-finite energy prediction");
  for (S v : pred.forces)
    require(std::isfinite(double(v)), "model: non-finite force prediction");
  return pred;
}

template <typename S>
GradientBufferT<S> ModelT<S>::backward(const GraphBatchT<S>& batch,
                                       const ForwardCacheT<S>& c,
                                       const std::vector<S>& d_energy,
                                       const std::vector<S>& d_forces) const {
  require(!c.layers.empty() || hp_.layers == 0, "model: missing forward cache");
  require(d_energy.size() == size_t(batch.n_graphs) &&
              d_forces.size() == size_t(3 * batch.n_nodes()),
          "model: upstream shape mismatch");

  const size_t H = hp_.hidden;
  const size_t N = batch.n_nodes();
  const size_t E = batch.n_edges();
  GradientBufferT<S> g = zero_grads();

  std::vector<S> dh(N * H, S(0));

  for (const auto& [k, hc] : c.heads) {
    const S* block = heads_.at(k).data();
    S* gblock = g.heads.at(k).data();
    const size_t G = hc.graphs.size();

    // energy branch
    std::vector<S> de(G);
    for (size_t gi = 0; gi < G; ++gi) de[gi] = d_energy[hc.graphs[gi]];
    std::vector<S> dpooled =
        mlp_backward_(block, gblock, "energy", H, hc.energy, de);
    for (size_t gi = 0; gi < G; ++gi) {
      const int gr = hc.graphs[gi];
      const int lo = batch.graph_offset[gr], hi = batch.graph_offset[gr + 1];
      const S inv = S(1) / S(hi - lo);
      for (int i = lo; i < hi; ++i)
        for (size_t kk = 0; kk < H; ++kk)
          dh[i * H + kk] += dpooled[gi * H + kk] * inv;
    }

    // force branch
    const size_t Ek = hc.edges.size();
    std::vector<S> ds(Ek);
    for (size_t ei = 0; ei < Ek; ++ei) {
      const int e = hc.edges[ei];
      const int i = batch.edge_dst[e];
      S acc = S(0);
      for (int kk = 0; kk < 3; ++kk)
        acc += d_forces[3 * i + kk] * c.dvec[3 * e + kk];
      ds[ei] = acc;
    }
    std::vector<S> dpsi_in =
        mlp_backward_(block, gblock, "force", H + 1, hc.force, ds);
    for (size_t ei = 0; ei < Ek; ++ei) {
      const int e = hc.edges[ei];
      const S* dpe = dpsi_in.data() + ei * (H + 1);
      S* dhd = dh.data() + batch.edge_dst[e] * H;
      S* dhs = dh.data() + batch.edge_src[e] * H;
      for (size_t kk = 0; kk < H; ++kk) {
        dhd[kk] += dpe[kk];
        dhs[kk] += dpe[kk];
      }
      // d/d(distance) does not reach any parameter
    }
  }

  const auto& SL = shared_layout_.entries;
  for (int l = hp_.layers - 1; l >= 0; --l) {
    const detail::LayerCache<S>& lc = c.layers[l];
    const size_t base = 1 + 8 * static_cast<size_t>(l);
    const S* eW1 = shared_.data() + SL[base + 0].offset;
    const S* eW2 = shared_.data() + SL[base + 2].offset;
    const S* nW1 = shared_.data() + SL[base + 4].offset;
    const S* nW2 = shared_.data() + SL[base + 6].offset;
    S* geW1 = g.shared.data() + SL[base + 0].offset;
    S* geb1 = g.shared.data() + SL[base + 1].offset;
    S* geW2 = g.shared.data() + SL[base + 2].offset;
    S* geb2 = g.shared.data() + SL[base + 3].offset;
    S* gnW1 = g.shared.data() + SL[base + 4].offset;
    S* gnb1 = g.shared.data() + SL[base + 5].offset;
    S* gnW2 = g.shared.data() + SL[base + 6].offset;
    S* gnb2 = g.shared.data() + SL[base + 7].offset;

    // node-update path (residual: dh flows through unchanged plus the MLP)
    std::vector<S> dvp1(N * H);
    num::linear_backward_span(lc.vp1.data(), N, H, nW2, H, dh.data(), gnW2,
                              gnb2, dvp1.data());
    std::vector<S> dvz1(N * H);
    num::activation_backward_span(lc.vz1.data(), dvp1.data(), dvp1.size(),
                                  dvz1.data());
    std::vector<S> dv(N * 2 * H);
    num::linear_backward_span(lc.v.data(), N, 2 * H, nW1, H, dvz1.data(),
                              gnW1, gnb1, dv.data());

    std::vector<S> dh_in = dh;  // residual term
    std::vector<S> dagg(N * H);
    for (size_t i = 0; i < N; ++i) {
      for (size_t kk = 0; kk < H; ++kk) {
        dh_in[i * H + kk] += dv[i * 2 * H + kk];
        dagg[i * H + kk] = dv[i * 2 * H + H + kk];
      }
    }

    // edge path: scatter of segment_sum is a gather
    std::vector<S> dm(E * H);
    for (size_t e = 0; e < E; ++e) {
      const S* da = dagg.data() + batch.edge_dst[e] * H;
      for (size_t kk = 0; kk < H; ++kk) dm[e * H + kk] = da[kk];
    }
    std::vector<S> dz2(E * H);
    num::activation_backward_span(lc.z2.data(), dm.data(), dm.size(),
                                  dz2.data());
    std::vector<S> da1(E * H);
    num::linear_backward_span(lc.a1.data(), E, H, eW2, H, dz2.data(), geW2,
                              geb2, da1.data());
    std::vector<S> dz1(E * H);
    num::activation_backward_span(lc.z1.data(), da1.data(), da1.size(),
                                  dz1.data());
    std::vector<S> du(E * (2 * H + 1));
    num::linear_backward_span(lc.u.data(), E, 2 * H + 1, eW1, H, dz1.data(),
                              geW1, geb1, du.data());
    for (size_t e = 0; e < E; ++e) {
      const S* due = du.data() + e * (2 * H + 1);
      S* dhd = dh_in.data() + batch.edge_dst[e] * H;
      S* dhs = dh_in.data() + batch.edge_src[e] * H;
      for (size_t kk = 0; kk < H; ++kk) {
        dhd[kk] += due[kk];
        dhs[kk] += due[H + kk];
      }
    }
    dh = std::move(dh_in);
  }

  S* gembed = g.shared.data() + SL[0].offset;
  for (size_t i = 0; i < N; ++i)
    for (size_t kk = 0; kk < H; ++kk)
      gembed[batch.species[i] * H + kk] += dh[i * H + kk];

  return g;
}

}  // namespace hmtl
