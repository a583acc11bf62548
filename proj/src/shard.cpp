#include "saekit/shard.hpp"

#include <algorithm>
#include <cstring>

namespace saekit {

std::string to_string(Site site) {
  switch (site) {
    case Site::attn_out_pre_wo: return "attn_out_pre_wo";
    case Site::mlp_out_post_norm: return "mlp_out_post_norm";
    case Site::resid_post_mlp: return "resid_post_mlp";
    case Site::mlp_in_post_norm: return "mlp_in_post_norm";
  }
  throw ConfigError("unknown site tag");
}

Site site_from_string(const std::string& name) {
  if (name == "attn_out_pre_wo") return Site::attn_out_pre_wo;
  if (name == "mlp_out_post_norm") return Site::mlp_out_post_norm;
  if (name == "resid_post_mlp") return Site::resid_post_mlp;
  if (name == "mlp_in_post_norm") return Site::mlp_in_post_norm;
  throw ConfigError("unknown site: '" + name + "'");
}

namespace {

constexpr char kMagic[4] = {'A', 'S', 'H', 'D'};
constexpr uint64_t kRowCountOffset = 15;

std::string encode_header(const ShardHeader& h) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, h.version);
  put_u8(out, static_cast<uint8_t>(h.site));
  put_u16(out, h.layer);
  put_u32(out, h.dim);
  put_u64(out, h.row_count);
  put_u32(out, static_cast<uint32_t>(h.corpus_tag.size()));
  out += h.corpus_tag;
  return out;
}

ShardHeader decode_header(const std::string& bytes, const std::filesystem::path& path) {
  if (bytes.size() < 27 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("not an ASHD shard: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  ShardHeader h;
  h.version = get_u32(p + 4);
  if (h.version != kShardFormatVersion) {
    throw IoError("unsupported shard version " + std::to_string(h.version) + ": " + path.string());
  }
  const uint8_t site = p[8];
  if (site > 3) throw IoError("corrupt shard header (bad site tag): " + path.string());
  h.site = static_cast<Site>(site);
  h.layer = get_u16(p + 9);
  h.dim = get_u32(p + 11);
  h.row_count = get_u64(p + 15);
  const uint32_t tag_len = get_u32(p + 23);
  if (h.dim == 0) throw IoError("corrupt shard header (dim = 0): " + path.string());
  if (h.row_count == 0) throw IoError("corrupt shard header (row_count = 0): " + path.string());
  if (27ull + tag_len > bytes.size()) {
    throw IoError("corrupt shard header (tag overruns file): " + path.string());
  }
  h.corpus_tag = bytes.substr(27, tag_len);
  return h;
}

}  // namespace

// ----------------------------- writer -----------------------------

ShardWriter::ShardWriter(const std::filesystem::path& path, Site site, uint16_t layer,
                         uint32_t dim, std::string corpus_tag)
    : path_(path), tmp_path_(path.string() + ".tmp"), dim_(dim) {
  if (dim == 0) throw ConfigError("ShardWriter: dim must be >= 1");
  out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open shard for writing: " + tmp_path_.string());
  ShardHeader h;
  h.site = site;
  h.layer = layer;
  h.dim = dim;
  h.row_count = 0;  // patched at close
  h.corpus_tag = std::move(corpus_tag);
  std::string bytes = encode_header(h);
  out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ShardWriter::~ShardWriter() {
  if (!closed_) {
    // abandoned writer: drop the temp file, never expose a partial shard
    out_.close();
    std::error_code ec;
    std::filesystem::remove(tmp_path_, ec);
  }
}

void ShardWriter::append_row(const float* row) {
  out_.write(reinterpret_cast<const char*>(row), static_cast<std::streamsize>(dim_) * 4);
  if (!out_) throw IoError("shard write failed: " + tmp_path_.string());
  ++rows_;
}

void ShardWriter::append_rows(const MatF& rows) {
  if (rows.cols() != static_cast<Eigen::Index>(dim_)) {
    throw std::invalid_argument("ShardWriter: row dimension mismatch");
  }
  for (Eigen::Index i = 0; i < rows.rows(); ++i) append_row(rows.row(i).data());
}

void ShardWriter::close() {
  if (closed_) return;
  if (rows_ == 0) throw IoError("refusing to close empty shard: " + path_.string());
  out_.seekp(kRowCountOffset);
  std::string rc;
  put_u64(rc, rows_);
  out_.write(rc.data(), 8);
  out_.flush();
  if (!out_) throw IoError("shard finalize failed: " + tmp_path_.string());
  out_.close();
  std::error_code ec;
  std::filesystem::rename(tmp_path_, path_, ec);
  if (ec) throw IoError("shard rename failed: " + path_.string() + ": " + ec.message());
  closed_ = true;
}

// ----------------------------- readers -----------------------------

ShardHeader read_shard_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + path.string());
  std::string head(4096, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<size_t>(in.gcount()));
  ShardHeader h = decode_header(head, path);

  const auto file_size = std::filesystem::file_size(path);
  const uint64_t want = h.payload_offset() + h.payload_bytes();
  if (file_size < want) {
    throw IoError("truncated shard payload: " + path.string() + " (file size " +
                  std::to_string(file_size) + ", expected " + std::to_string(want) +
                  ", payload starts at offset " + std::to_string(h.payload_offset()) + ")");
  }
  if (file_size > want) {
    throw IoError("trailing bytes after shard payload: " + path.string());
  }
  return h;
}

ShardReader::ShardReader(const std::filesystem::path& path)
    : path_(path), header_(read_shard_header(path)) {
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open shard: " + path.string());
  in_.seekg(static_cast<std::streamoff>(header_.payload_offset()));
}

bool ShardReader::next_row(VecF& row) {
  if (cursor_ >= header_.row_count) return false;
  row.resize(header_.dim);
  in_.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(header_.dim) * 4);
  if (static_cast<uint64_t>(in_.gcount()) != header_.dim * 4ull) {
    throw IoError("truncated shard payload: " + path_.string() + " at offset " +
                  std::to_string(header_.payload_offset() + cursor_ * header_.dim * 4ull));
  }
  ++cursor_;
  return true;
}

ShardSetReader::ShardSetReader(std::vector<std::filesystem::path> paths)
    : paths_(std::move(paths)) {
  if (paths_.empty()) throw ConfigError("ShardSetReader: no shards given");
  for (const auto& p : paths_) {
    ShardHeader h = read_shard_header(p);
    if (dim_ == 0) dim_ = h.dim;
    if (h.dim != dim_) {
      throw IoError("shard dimension mismatch: " + p.string() + " has dim " +
                    std::to_string(h.dim) + ", expected " + std::to_string(dim_));
    }
    total_rows_ += h.row_count;
  }
  reset();
}

void ShardSetReader::reset() {
  index_ = 0;
  current_ = std::make_unique<ShardReader>(paths_[0]);
}

bool ShardSetReader::next_row(VecF& row) {
  while (true) {
    if (current_->next_row(row)) return true;
    if (++index_ >= paths_.size()) return false;
    current_ = std::make_unique<ShardReader>(paths_[index_]);
  }
}

ShardRowAccessor::ShardRowAccessor(std::vector<std::filesystem::path> paths) {
  if (paths.empty()) throw ConfigError("ShardRowAccessor: no shards given");
  for (auto& p : paths) {
    Entry e{p, read_shard_header(p), total_rows_};
    if (dim_ == 0) dim_ = e.header.dim;
    if (e.header.dim != dim_) {
      throw IoError("shard dimension mismatch: " + p.string());
    }
    total_rows_ += e.header.row_count;
    entries_.push_back(std::move(e));
  }
}

MatF ShardRowAccessor::read_rows(uint64_t start, uint64_t count) {
  if (start + count > total_rows_) {
    throw std::out_of_range("ShardRowAccessor: rows [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") exceed " +
                            std::to_string(total_rows_));
  }
  MatF out(count, dim_);
  uint64_t filled = 0;
  // locate the first shard containing `start`
  size_t idx = 0;
  while (idx + 1 < entries_.size() && entries_[idx + 1].first_row <= start) ++idx;
  while (filled < count) {
    const Entry& e = entries_[idx];
    const uint64_t local = start + filled - e.first_row;
    const uint64_t here = std::min(count - filled, e.header.row_count - local);
    std::ifstream in(e.path, std::ios::binary);
    if (!in) throw IoError("cannot open shard: " + e.path.string());
    in.seekg(static_cast<std::streamoff>(e.header.payload_offset() + local * dim_ * 4ull));
    in.read(reinterpret_cast<char*>(out.row(filled).data()),
            static_cast<std::streamsize>(here * dim_ * 4ull));
    if (static_cast<uint64_t>(in.gcount()) != here * dim_ * 4ull) {
      throw IoError("truncated shard payload: " + e.path.string() + " at offset " +
                    std::to_string(e.header.payload_offset() + local * dim_ * 4ull));
    }
    filled += here;
    ++idx;
  }
  return out;
}

// ----------------------------- shard-set writer -----------------------------

ShardSetWriter::ShardSetWriter(std::filesystem::path dir, std::string model, Site site,
                               uint16_t layer, uint32_t dim, std::string corpus_tag,
                               uint64_t target_bytes)
    : dir_(std::move(dir)),
      model_(std::move(model)),
      site_(site),
      layer_(layer),
      dim_(dim),
      corpus_tag_(std::move(corpus_tag)),
      target_bytes_(std::max<uint64_t>(target_bytes, dim * 4ull)) {
  std::filesystem::create_directories(dir_);
}

void ShardSetWriter::roll() {
  if (current_) {
    current_->close();
    current_.reset();
  }
  char name[256];
  std::snprintf(name, sizeof(name), "%s_%s_%u_%05u.ashd", model_.c_str(),
                to_string(site_).c_str(), static_cast<unsigned>(layer_),
                static_cast<unsigned>(seq_));
  finished_.push_back(dir_ / name);
  current_ = std::make_unique<ShardWriter>(finished_.back(), site_, layer_, dim_, corpus_tag_);
  current_bytes_ = 0;
  ++seq_;
}

void ShardSetWriter::append_row(const float* row) {
  if (!current_ || current_bytes_ >= target_bytes_) roll();
  current_->append_row(row);
  current_bytes_ += dim_ * 4ull;
  ++rows_;
}

void ShardSetWriter::append_rows(const MatF& rows) {
  if (rows.cols() != static_cast<Eigen::Index>(dim_)) {
    throw std::invalid_argument("ShardSetWriter: row dimension mismatch");
  }
  for (Eigen::Index i = 0; i < rows.rows(); ++i) append_row(rows.row(i).data());
}

std::vector<std::filesystem::path> ShardSetWriter::close() {
  if (current_) {
    current_->close();
    current_.reset();
  }
  return finished_;
}

// ----------------------------- bucket shuffle -----------------------------

ShuffleResult shuffle_buckets(const std::vector<std::filesystem::path>& shards,
                              const std::filesystem::path& out_dir, const std::string& model,
                              int64_t bucket_size, uint64_t seed,
                              const std::vector<std::filesystem::path>& target_shards,
                              uint64_t target_bytes) {
  if (bucket_size < 1) throw ConfigError("shuffle_buckets: bucket_size must be >= 1");
  ShardSetReader in(shards);
  std::optional<ShardSetReader> target_in;
  if (!target_shards.empty()) {
    target_in.emplace(target_shards);
    if (target_in->total_rows() != in.total_rows()) {
      throw IoError("shuffle_buckets: paired streams disagree on row count");
    }
  }
  ShardHeader first = read_shard_header(shards[0]);
  std::string tag = first.corpus_tag;
  for (const auto& p : shards) {
    if (read_shard_header(p).corpus_tag != tag) {
      tag = "mixed";
      break;
    }
  }

  ShardSetWriter out(out_dir, model, first.site, first.layer, in.dim(), tag, target_bytes);
  std::optional<ShardSetWriter> target_out;
  if (target_in) {
    ShardHeader th = read_shard_header(target_shards[0]);
    target_out.emplace(out_dir, model + "-target", th.site, th.layer, target_in->dim(), tag,
                       target_bytes);
  }

  MatF bucket(bucket_size, in.dim());
  MatF target_bucket;
  if (target_in) target_bucket.resize(bucket_size, target_in->dim());
  std::vector<uint32_t> perm(static_cast<size_t>(bucket_size));
  VecF row, trow;
  uint64_t bucket_index = 0;
  while (true) {
    int64_t filled = 0;
    while (filled < bucket_size && in.next_row(row)) {
      bucket.row(filled) = row.transpose();
      if (target_in) {
        target_in->next_row(trow);
        target_bucket.row(filled) = trow.transpose();
      }
      ++filled;
    }
    if (filled == 0) break;
    perm.resize(static_cast<size_t>(filled));
    for (int64_t i = 0; i < filled; ++i) perm[static_cast<size_t>(i)] = static_cast<uint32_t>(i);
    Rng rng(mix_seed(seed, bucket_index));
    rng.shuffle(perm.begin(), perm.end());
    for (int64_t i = 0; i < filled; ++i) {
      out.append_row(bucket.row(perm[static_cast<size_t>(i)]).data());
      if (target_out) {
        target_out->append_row(target_bucket.row(perm[static_cast<size_t>(i)]).data());
      }
    }
    ++bucket_index;
    if (filled < bucket_size) break;
  }

  ShuffleResult result;
  result.shards = out.close();
  if (target_out) result.target_shards = target_out->close();
  return result;
}

// ----------------------------- batch source -----------------------------

ShardBatchSource::ShardBatchSource(std::vector<std::filesystem::path> shards, int64_t batch_size,
                                   double norm_c)
    : reader_(std::move(shards)),
      batch_size_(batch_size),
      inv_c_(static_cast<float>(1.0 / norm_c)) {
  if (batch_size < 1) throw ConfigError("ShardBatchSource: batch_size must be >= 1");
  if (!(norm_c > 0)) throw ConfigError("ShardBatchSource: norm constant must be > 0");
}

ShardBatchSource::ShardBatchSource(std::vector<std::filesystem::path> shards,
                                   std::vector<std::filesystem::path> target_shards,
                                   int64_t batch_size, double norm_c)
    : ShardBatchSource(std::move(shards), batch_size, norm_c) {
  target_reader_.emplace(std::move(target_shards));
  if (target_reader_->total_rows() != reader_.total_rows()) {
    throw IoError("ShardBatchSource: paired streams disagree on row count");
  }
}

bool ShardBatchSource::next(MatF& x, MatF& target) {
  x.resize(batch_size_, reader_.dim());
  VecF row;
  for (int64_t i = 0; i < batch_size_; ++i) {
    if (!reader_.next_row(row)) return false;  // partial batch dropped
    x.row(i) = row.transpose() * inv_c_;
  }
  if (target_reader_) {
    target.resize(batch_size_, target_reader_->dim());
    for (int64_t i = 0; i < batch_size_; ++i) {
      if (!target_reader_->next_row(row)) return false;
      target.row(i) = row.transpose() * inv_c_;
    }
  } else {
    target = x;
  }
  return true;
}

void ShardBatchSource::reset() {
  reader_.reset();
  if (target_reader_) target_reader_->reset();
}

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("not a directory: " + dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ashd") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace saekit
