#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmtl/graph.hpp"

// Sample file format (little-endian):
//   magic "HMTD", version u32, dataset_id u8, aligned u8, sample count u64,
//   then SampleRecords back-to-back.
// SampleRecord:
//   n_atoms u32, species u8[n], positions f64[n][3], energy_per_atom f64,
//   forces f64[n][3], dataset_id u8, crc32 u32 (CRC-32 of everything before
//   the crc field).
namespace hmtl::io {

constexpr uint32_t kSampleMagic = 0x44544d48;  // "HMTD"
constexpr uint32_t kSampleVersion = 1;

struct FileHeader {
  uint8_t dataset_id = 0;
  uint8_t aligned = 0;
  uint64_t count = 0;
};

// Every open-for-read of a sample file bumps this counter; the data plane's
// "no filesystem reads during training" property is asserted against it.
uint64_t read_open_count();

size_t record_size(size_t n_atoms);

// Serialize one sample into `out` (appended).
void append_record(const AtomisticSample& s, std::vector<uint8_t>& out);

// Parse one record starting at `offset`; advances `offset`. Validates CRC.
AtomisticSample parse_record(const uint8_t* data, size_t size,
                             size_t& offset);

void write_sample_file(const std::string& path, const FileHeader& hdr,
                       const std::vector<AtomisticSample>& samples);

// Reads header + raw record bytes (unparsed). Validates magic/version and
// that `count` records are present; per-record CRC is checked on parse.
struct RawFile {
  FileHeader header;
  std::vector<uint8_t> records;          // records back-to-back
  std::vector<uint64_t> offsets;         // size count+1, into `records`
};
RawFile read_sample_file_raw(const std::string& path);

std::vector<AtomisticSample> read_sample_file(const std::string& path,
                                              FileHeader* hdr = nullptr);

// Header-only peek (one read-open).
FileHeader read_sample_header(const std::string& path);

}  // namespace hmtl::io
