#include "hmtl/sample_io.hpp"

#include <zlib.h>

#include <atomic>
#include <cstdio>
#include <cstring>
#include <memory>

#include "hmtl/error.hpp"

namespace hmtl::io {

namespace {

std::atomic<uint64_t> g_read_opens{0};

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int i = 0; i < 8; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_f64(std::vector<uint8_t>& v, double d) {
  uint64_t x;
  std::memcpy(&x, &d, 8);
  put_u64(v, x);
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(p[i]) << (8 * i);
  return x;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(p[i]) << (8 * i);
  return x;
}
double get_f64(const uint8_t* p) {
  uint64_t x = get_u64(p);
  double d;
  std::memcpy(&d, &x, 8);
  return d;
}

uint32_t crc_of(const uint8_t* p, size_t n) {
  return static_cast<uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

uint64_t read_open_count() { return g_read_opens.load(); }

size_t record_size(size_t n) {
  return 4 + n + 24 * n + 8 + 24 * n + 1 + 4;
}

void append_record(const AtomisticSample& s, std::vector<uint8_t>& out) {
  const size_t body_start = out.size();
  const size_t n = s.n_atoms();
  put_u32(out, static_cast<uint32_t>(n));
  out.insert(out.end(), s.species.begin(), s.species.end());
  for (size_t i = 0; i < 3 * n; ++i) put_f64(out, s.positions[i]);
  put_f64(out, s.energy_per_atom);
  for (size_t i = 0; i < 3 * n; ++i) put_f64(out, s.forces[i]);
  out.push_back(s.dataset_id);
  uint32_t crc = crc_of(out.data() + body_start, out.size() - body_start);
  put_u32(out, crc);
}

AtomisticSample parse_record(const uint8_t* data, size_t size,
                             size_t& offset) {
  require(offset + 4 <= size, "record: truncated header", ErrorCode::io);
  const size_t body_start = offset;
  uint32_t n = get_u32(data + offset);
  const size_t total = record_size(n);
  require(offset + total <= size, "record: truncated body", ErrorCode::io);
  uint32_t stored_crc = get_u32(data + offset + total - 4);
  uint32_t crc = crc_of(data + body_start, total - 4);
  require(crc == stored_crc, "record: CRC mismatch", ErrorCode::io);

  AtomisticSample s;
  offset += 4;
  s.species.assign(data + offset, data + offset + n);
  offset += n;
  s.positions.resize(3 * n);
  for (size_t i = 0; i < 3 * n; ++i, offset += 8)
    s.positions[i] = get_f64(data + offset);
  s.energy_per_atom = get_f64(data + offset);
  offset += 8;
  s.forces.resize(3 * n);
  for (size_t i = 0; i < 3 * n; ++i, offset += 8)
    s.forces[i] = get_f64(data + offset);
  s.dataset_id = data[offset];
  offset += 1 + 4;  // dataset_id + crc
  return s;
}

void write_sample_file(const std::string& path, const FileHeader& hdr,
                       const std::vector<AtomisticSample>& samples) {
  std::vector<uint8_t> buf;
  put_u32(buf, kSampleMagic);
  put_u32(buf, kSampleVersion);
  buf.push_back(hdr.dataset_id);
  buf.push_back(hdr.aligned);
  put_u64(buf, samples.size());
  for (const AtomisticSample& s : samples) append_record(s, buf);

  FilePtr f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, "cannot open for write: " + path, ErrorCode::io);
  size_t written = std::fwrite(buf.data(), 1, buf.size(), f.get());
  require(written == buf.size(), "short write: " + path, ErrorCode::io);
}

RawFile read_sample_file_raw(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, "cannot open for read: " + path, ErrorCode::io);
  g_read_opens.fetch_add(1);

  std::fseek(f.get(), 0, SEEK_END);
  long len = std::ftell(f.get());
  std::fseek(f.get(), 0, SEEK_SET);
  require(len >= 18, "sample file too short: " + path, ErrorCode::io);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  size_t got = std::fread(buf.data(), 1, buf.size(), f.get());
  require(got == buf.size(), "short read: " + path, ErrorCode::io);

  require(get_u32(buf.data()) == kSampleMagic,
          "bad magic (not a sample file): " + path, ErrorCode::io);
  require(get_u32(buf.data() + 4) == kSampleVersion,
          "unsupported sample file version: " + path, ErrorCode::io);
  RawFile rf;
  rf.header.dataset_id = buf[8];
  rf.header.aligned = buf[9];
  rf.header.count = get_u64(buf.data() + 10);

  size_t off = 18;
  rf.offsets.push_back(0);
  for (uint64_t i = 0; i < rf.header.count; ++i) {
    require(off + 4 <= buf.size(), "truncated record in " + path,
            ErrorCode::io);
    uint32_t n = get_u32(buf.data() + off);
    size_t total = record_size(n);
    require(off + total <= buf.size(), "truncated record in " + path,
            ErrorCode::io);
    off += total;
    rf.offsets.push_back(off - 18);
  }
  require(off == buf.size(), "trailing bytes in " + path, ErrorCode::io);
  rf.records.assign(buf.begin() + 18, buf.end());
  return rf;
}

std::vector<AtomisticSample> read_sample_file(const std::string& path,
                                              FileHeader* hdr) {
  RawFile rf = read_sample_file_raw(path);
  if (hdr) *hdr = rf.header;
  std::vector<AtomisticSample> out;
  out.reserve(rf.header.count);
  size_t off = 0;
  for (uint64_t i = 0; i < rf.header.count; ++i)
    out.push_back(parse_record(rf.records.data(), rf.records.size(), off));
  return out;
}

FileHeader read_sample_header(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, "cannot open for read: " + path, ErrorCode::io);
  g_read_opens.fetch_add(1);
  uint8_t hdr[18];
  size_t got = std::fread(hdr, 1, sizeof hdr, f.get());
  require(got == sizeof hdr, "short read: " + path, ErrorCode::io);
  require(get_u32(hdr) == kSampleMagic, "bad magic: " + path, ErrorCode::io);
  require(get_u32(hdr + 4) == kSampleVersion, "bad version: " + path,
          ErrorCode::io);
  FileHeader h;
  h.dataset_id = hdr[8];
  h.aligned = hdr[9];
  h.count = get_u64(hdr + 10);
  return h;
}

}  // namespace hmtl::io
