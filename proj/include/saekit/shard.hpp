#pragma once

// Activation shard storage: fixed-width float32 rows behind a small header,
// written once and then immutable. Readers stream rows sequentially or fetch
// batches by index; shuffling permutes rows within fixed-size buckets.

#include "saekit/common.hpp"
#include "saekit/trainer.hpp"

#include <fstream>
#include <memory>
#include <optional>
#include <vector>

namespace saekit {

enum class Site : uint8_t {
  attn_out_pre_wo = 0,    // concatenated per-head attention outputs, before W_O
  mlp_out_post_norm = 1,  // MLP output after the post-MLP RMSNorm
  resid_post_mlp = 2,     // residual stream after the MLP block
  mlp_in_post_norm = 3,   // transcoder input, after the pre-MLP RMSNorm
};

std::string to_string(Site site);
Site site_from_string(const std::string& name);

struct SiteSpec {
  Site site = Site::resid_post_mlp;
  int layer = 0;
};

inline constexpr uint32_t kShardFormatVersion = 1;

struct ShardHeader {
  uint32_t version = kShardFormatVersion;
  Site site = Site::resid_post_mlp;
  uint16_t layer = 0;
  uint32_t dim = 0;        // n
  uint64_t row_count = 0;
  std::string corpus_tag;

  uint64_t payload_offset() const { return 27 + corpus_tag.size(); }
  uint64_t payload_bytes() const { return row_count * dim * 4ull; }
};

// Exclusive writer for one shard file. Rows stream to <path>.tmp; close()
// patches the row count and renames into place. Empty shards are invalid.
class ShardWriter {
 public:
  ShardWriter(const std::filesystem::path& path, Site site, uint16_t layer, uint32_t dim,
              std::string corpus_tag);
  ~ShardWriter();
  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  void append_row(const float* row);
  void append_rows(const MatF& rows);
  uint64_t rows_written() const { return rows_; }
  void close();

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_path_;
  std::ofstream out_;
  uint32_t dim_;
  uint64_t rows_ = 0;
  bool closed_ = false;
};

ShardHeader read_shard_header(const std::filesystem::path& path);

// Sequential row reader over one shard.
class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& path);
  const ShardHeader& header() const { return header_; }
  bool next_row(VecF& row);

 private:
  std::filesystem::path path_;
  ShardHeader header_;
  std::ifstream in_;
  uint64_t cursor_ = 0;
};

// Sequential reader over an ordered shard list (one logical stream).
class ShardSetReader {
 public:
  explicit ShardSetReader(std::vector<std::filesystem::path> paths);
  bool next_row(VecF& row);
  void reset();
  uint64_t total_rows() const { return total_rows_; }
  uint32_t dim() const { return dim_; }

 private:
  std::vector<std::filesystem::path> paths_;
  std::unique_ptr<ShardReader> current_;
  size_t index_ = 0;
  uint64_t total_rows_ = 0;
  uint32_t dim_ = 0;
};

// Random access by global row index across an ordered shard list; readers are
// independent, shards immutable, so many accessors may coexist.
class ShardRowAccessor {
 public:
  explicit ShardRowAccessor(std::vector<std::filesystem::path> paths);
  uint64_t total_rows() const { return total_rows_; }
  uint32_t dim() const { return dim_; }
  // Reads `count` consecutive rows starting at `start` (must be in range).
  MatF read_rows(uint64_t start, uint64_t count);

 private:
  struct Entry {
    std::filesystem::path path;
    ShardHeader header;
    uint64_t first_row;
  };
  std::vector<Entry> entries_;
  uint64_t total_rows_ = 0;
  uint32_t dim_ = 0;
};

// Rolls over to a new `<model>_<site>_<layer>_<seq>.ashd` file whenever the
// current shard reaches target_bytes.
class ShardSetWriter {
 public:
  ShardSetWriter(std::filesystem::path dir, std::string model, Site site, uint16_t layer,
                 uint32_t dim, std::string corpus_tag, uint64_t target_bytes = 64ull << 20);
  void append_row(const float* row);
  void append_rows(const MatF& rows);
  uint64_t rows_written() const { return rows_; }
  std::vector<std::filesystem::path> close();

 private:
  void roll();

  std::filesystem::path dir_;
  std::string model_;
  Site site_;
  uint16_t layer_;
  uint32_t dim_;
  std::string corpus_tag_;
  uint64_t target_bytes_;
  uint64_t rows_ = 0;
  uint32_t seq_ = 0;
  std::unique_ptr<ShardWriter> current_;
  uint64_t current_bytes_ = 0;
  std::vector<std::filesystem::path> finished_;
};

// Streams rows into buckets of bucket_size, applies an independently seeded
// uniform permutation inside each bucket, and writes the result as a fresh
// shard set. With paired targets the identical permutation is applied to both
// streams so (input, target) rows stay aligned.
struct ShuffleResult {
  std::vector<std::filesystem::path> shards;
  std::vector<std::filesystem::path> target_shards;  // empty unless paired
};

ShuffleResult shuffle_buckets(const std::vector<std::filesystem::path>& shards,
                              const std::filesystem::path& out_dir, const std::string& model,
                              int64_t bucket_size, uint64_t seed,
                              const std::vector<std::filesystem::path>& target_shards = {},
                              uint64_t target_bytes = 64ull << 20);

// Batch stream over shards: consecutive rows divided by norm_c, final partial
// batch dropped. Paired construction yields transcoder (input, target) batches.
class ShardBatchSource final : public BatchSource {
 public:
  ShardBatchSource(std::vector<std::filesystem::path> shards, int64_t batch_size, double norm_c);
  ShardBatchSource(std::vector<std::filesystem::path> shards,
                   std::vector<std::filesystem::path> target_shards, int64_t batch_size,
                   double norm_c);

  bool next(MatF& x, MatF& target) override;
  void reset() override;
  Eigen::Index dim() const override { return reader_.dim(); }
  uint64_t batches_per_pass() const { return reader_.total_rows() / batch_size_; }

 private:
  ShardSetReader reader_;
  std::optional<ShardSetReader> target_reader_;
  int64_t batch_size_;
  float inv_c_;
};

// Lists `*.ashd` files in a directory in lexicographic order.
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir);

}  // namespace saekit
