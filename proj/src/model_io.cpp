#include <cstdio>
#include <cstring>
#include <memory>

#include "hmtl/model.hpp"

// Checkpoint format (little-endian):
//   magic "HMTP", version u32,
//   hyperparameter record: n_species u32, layers u32, hidden u32,
//     head_width u32, head_depth u32, n_heads u32, cutoff f64,
//     activation u8 (1 = silu),
//   shared block, then head blocks in head-index order, each prefixed by
//   element count u64; elements are f64.
namespace hmtl {

namespace {

constexpr uint32_t kCkptMagic = 0x50544d48;  // "HMTP"
constexpr uint32_t kCkptVersion = 1;

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void wr(FILE* f, const void* p, size_t n) {
  require(std::fwrite(p, 1, n, f) == n, "checkpoint: short write",
          ErrorCode::io);
}
void rd(FILE* f, void* p, size_t n) {
  require(std::fread(p, 1, n, f) == n, "checkpoint: short read",
          ErrorCode::io);
}
void wr_u32(FILE* f, uint32_t x) { wr(f, &x, 4); }
void wr_u64(FILE* f, uint64_t x) { wr(f, &x, 8); }
void wr_f64(FILE* f, double x) { wr(f, &x, 8); }
uint32_t rd_u32(FILE* f) {
  uint32_t x;
  rd(f, &x, 4);
  return x;
}
uint64_t rd_u64(FILE* f) {
  uint64_t x;
  rd(f, &x, 8);
  return x;
}
double rd_f64(FILE* f) {
  double x;
  rd(f, &x, 8);
  return x;
}

void wr_block(FILE* f, const std::vector<double>& b) {
  wr_u64(f, b.size());
  wr(f, b.data(), 8 * b.size());
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelHyper& hp,
                     const std::vector<double>& shared,
                     const std::vector<std::vector<double>>& heads) {
  require(static_cast<int>(heads.size()) == hp.n_heads,
          "checkpoint: need all head blocks in head-index order");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, "cannot open for write: " + path, ErrorCode::io);
  wr_u32(f.get(), kCkptMagic);
  wr_u32(f.get(), kCkptVersion);
  wr_u32(f.get(), static_cast<uint32_t>(hp.n_species));
  wr_u32(f.get(), static_cast<uint32_t>(hp.layers));
  wr_u32(f.get(), static_cast<uint32_t>(hp.hidden));
  wr_u32(f.get(), static_cast<uint32_t>(hp.head_width));
  wr_u32(f.get(), static_cast<uint32_t>(hp.head_depth));
  wr_u32(f.get(), static_cast<uint32_t>(hp.n_heads));
  wr_f64(f.get(), hp.cutoff);
  uint8_t act = 1;
  wr(f.get(), &act, 1);
  wr_block(f.get(), shared);
  for (const auto& h : heads) wr_block(f.get(), h);
}

ModelT<double> load_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, "cannot open for read: " + path, ErrorCode::io);
  require(rd_u32(f.get()) == kCkptMagic, "not a checkpoint: " + path,
          ErrorCode::io);
  require(rd_u32(f.get()) == kCkptVersion,
          "unsupported checkpoint version: " + path, ErrorCode::io);
  ModelHyper hp;
  hp.n_species = static_cast<int>(rd_u32(f.get()));
  hp.layers = static_cast<int>(rd_u32(f.get()));
  hp.hidden = static_cast<int>(rd_u32(f.get()));
  hp.head_width = static_cast<int>(rd_u32(f.get()));
  hp.head_depth = static_cast<int>(rd_u32(f.get()));
  hp.n_heads = static_cast<int>(rd_u32(f.get()));
  hp.cutoff = rd_f64(f.get());
  uint8_t act;
  rd(f.get(), &act, 1);
  require(act == 1, "unknown activation id in checkpoint", ErrorCode::io);

  std::vector<int> all_heads(hp.n_heads);
  for (int k = 0; k < hp.n_heads; ++k) all_heads[k] = k;
  ModelT<double> m(hp, 0, all_heads);

  uint64_t n = rd_u64(f.get());
  require(n == m.shared_size(), "checkpoint: shared block size mismatch",
          ErrorCode::io);
  rd(f.get(), m.shared_block().data(), 8 * n);
  for (int k = 0; k < hp.n_heads; ++k) {
    uint64_t hn = rd_u64(f.get());
    require(hn == m.head_size(), "checkpoint: head block size mismatch",
            ErrorCode::io);
    rd(f.get(), m.head_block(k).data(), 8 * hn);
  }
  return m;
}

}  // namespace hmtl
