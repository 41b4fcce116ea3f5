#include "iis/datastore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "iis/numerics.hpp"

namespace iis {

namespace {

constexpr char kMagic[4] = {'I', 'I', 'S', 'E'};
constexpr std::uint32_t kMatrixVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& buf, float v) {
  put_u32(buf, std::bit_cast<std::uint32_t>(v));
}

class ByteReader {
 public:
  ByteReader(std::string data, std::filesystem::path path)
      : data_(std::move(data)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= std::uint32_t(std::uint8_t(data_[pos_ + std::size_t(i)])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= std::uint64_t(std::uint8_t(data_[pos_ + std::size_t(i)])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  std::uint8_t u8() {
    need(1);
    return std::uint8_t(data_[pos_++]);
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void raw(char* out, std::size_t n) {
    need(n);
    std::copy(data_.begin() + long(pos_), data_.begin() + long(pos_ + n), out);
    pos_ += n;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) {
      throw DataError(DataCode::truncated,
                      path_.string() + ": truncated matrix container");
    }
  }

  std::string data_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError(DataCode::io, path.string() + ": cannot open for reading");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void spew(const std::filesystem::path& path, const std::string& data) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError(DataCode::io, path.string() + ": cannot open for writing");
  }
  out.write(data.data(), long(data.size()));
  if (!out) {
    throw DataError(DataCode::io, path.string() + ": short write");
  }
}

std::filesystem::path sibling_matrix_path(const std::filesystem::path& json_path) {
  std::filesystem::path p = json_path;
  p.replace_extension(".iise");
  return p;
}

std::filesystem::path resolve_sibling(const std::filesystem::path& json_path,
                                      const std::string& name) {
  std::filesystem::path rel(name);
  if (rel.is_absolute()) return rel;
  return json_path.parent_path() / rel;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw UsageError("unknown split: " + name);
}

void validate_embeddings(const EmbeddingDataset& ds) {
  if (ds.embeddings.rows() == 0) {
    throw DataError(DataCode::zero_samples, "embeddings: zero samples");
  }
  if (ds.embeddings.cols() == 0) {
    throw DataError(DataCode::invariant, "embeddings: zero dimensions");
  }
  if (Eigen::Index(ds.labels.size()) != ds.embeddings.rows()) {
    throw DataError(DataCode::invariant, "embeddings: one label per row required");
  }
  if (ds.n_classes < 1) {
    throw DataError(DataCode::invariant, "embeddings: class count must be >= 1");
  }
  for (int y : ds.labels) {
    if (y < 0 || y >= ds.n_classes) {
      throw DataError(DataCode::invariant, "embeddings: label out of range");
    }
  }
  if (!ds.embeddings.allFinite()) {
    throw DataError(DataCode::invariant, "embeddings: non-finite values");
  }
}

void validate_library(const ConceptLibrary& lib) {
  if (lib.vectors.rows() == 0) {
    throw DataError(DataCode::invariant, "library: no concepts");
  }
  if (lib.names.size() != std::size_t(lib.vectors.rows())) {
    throw DataError(DataCode::invariant, "library: one name per concept required");
  }
  std::set<std::string> seen;
  for (const auto& n : lib.names) {
    if (n.empty() || !seen.insert(n).second) {
      throw DataError(DataCode::invariant, "library: empty or duplicate concept name");
    }
  }
  static const std::set<std::string> kinds = {"prototype", "cluster", "end2end",
                                              "text", "planted"};
  if (kinds.count(lib.kind) == 0) {
    throw DataError(DataCode::invariant, "library: unknown kind '" + lib.kind + "'");
  }
  if (!lib.vectors.allFinite()) {
    throw DataError(DataCode::invariant, "library: non-finite concept vectors");
  }
}

void validate_schedule(const SparsitySchedule& sched) {
  // Schedules arrive as user parameters, so violations are usage errors.
  if (sched.ratios.size() < 2) {
    throw UsageError("schedule: at least two ratios required");
  }
  for (std::size_t i = 0; i < sched.ratios.size(); ++i) {
    const double r = sched.ratios[i];
    if (!(r >= 0.0 && r < 1.0)) {
      throw UsageError("schedule: ratios must lie in [0, 1)");
    }
    if (i > 0 && !(r > sched.ratios[i - 1])) {
      throw UsageError("schedule: ratios must be strictly increasing");
    }
  }
}

void validate_report(const IISReport& rep) {
  const std::size_t k = rep.ratios.size();
  if (k < 2) {
    throw DataError(DataCode::invariant, "report: at least two curve points required");
  }
  if (rep.interpretation_accuracies.size() != k || rep.arr_values.size() != k) {
    throw DataError(DataCode::invariant, "report: curve arrays must have equal length");
  }
  try {
    validate_schedule(SparsitySchedule{rep.ratios});
  } catch (const UsageError& e) {
    throw DataError(DataCode::invariant, std::string("report: ") + e.what());
  }
  if (!(rep.representation_accuracy > 0.0)) {
    throw DataError(DataCode::invariant, "report: representation accuracy must be positive");
  }
  for (std::size_t i = 0; i < k; ++i) {
    const double expect = rep.interpretation_accuracies[i] / rep.representation_accuracy;
    if (std::abs(rep.arr_values[i] - expect) > 1e-12) {
      throw DataError(DataCode::invariant, "report: arr inconsistent with accuracies");
    }
  }
  const double area = curve_area_mean(rep.ratios, rep.arr_values);
  if (std::abs(area - rep.iis) > 1e-9) {
    throw DataError(DataCode::invariant, "report: iis inconsistent with curve");
  }
  if (!rep.cluster_dims.empty() && rep.cluster_dims.size() != k) {
    throw DataError(DataCode::invariant, "report: cluster dims must match curve length");
  }
}

void save_matrix_file(const std::filesystem::path& path,
                      const Eigen::Ref<const Eigen::MatrixXd>& matrix,
                      const std::vector<int>& labels, int n_classes) {
  std::string buf;
  buf.reserve(29 + std::size_t(matrix.size()) * 4 + labels.size() * 4 + 12);
  buf.append(kMagic, 4);
  put_u32(buf, kMatrixVersion);
  put_u64(buf, std::uint64_t(matrix.rows()));
  put_u64(buf, std::uint64_t(matrix.cols()));
  buf.push_back(char(0));  // dtype float32
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    for (Eigen::Index c = 0; c < matrix.cols(); ++c) {
      put_f32(buf, float(matrix(r, c)));
    }
  }
  put_u64(buf, std::uint64_t(labels.size()));
  for (int y : labels) put_u32(buf, std::uint32_t(y));
  put_u32(buf, std::uint32_t(n_classes));
  spew(path, buf);
}

MatrixFile load_matrix_file(const std::filesystem::path& path) {
  ByteReader r(slurp(path), path);
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw DataError(DataCode::bad_magic, path.string() + ": not a matrix container");
  }
  if (r.u32() != kMatrixVersion) {
    throw DataError(DataCode::bad_version, path.string() + ": unsupported container version");
  }
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (rows == 0) {
    throw DataError(DataCode::zero_samples, path.string() + ": zero rows");
  }
  constexpr std::uint64_t kMaxElems = std::uint64_t(1) << 32;
  if (cols == 0 || rows > kMaxElems || cols > kMaxElems ||
      rows * cols > kMaxElems) {
    throw DataError(DataCode::dim_overflow, path.string() + ": implausible dimensions");
  }
  if (r.u8() != 0) {
    throw DataError(DataCode::bad_dtype, path.string() + ": unsupported dtype");
  }
  MatrixFile out;
  out.matrix.resize(Eigen::Index(rows), Eigen::Index(cols));
  for (std::uint64_t i = 0; i < rows; ++i) {
    for (std::uint64_t j = 0; j < cols; ++j) {
      out.matrix(Eigen::Index(i), Eigen::Index(j)) = double(r.f32());
    }
  }
  const std::uint64_t nlab = r.u64();
  if (nlab > rows) {
    throw DataError(DataCode::invariant, path.string() + ": more labels than rows");
  }
  out.labels.resize(std::size_t(nlab));
  for (std::uint64_t i = 0; i < nlab; ++i) {
    out.labels[std::size_t(i)] = int(r.u32());
  }
  out.n_classes = int(r.u32());
  if (r.remaining() != 0) {
    throw DataError(DataCode::invariant, path.string() + ": trailing bytes");
  }
  return out;
}

void save_embeddings(const std::filesystem::path& path,
                     const EmbeddingDataset& ds) {
  validate_embeddings(ds);
  save_matrix_file(path, ds.embeddings, ds.labels, ds.n_classes);
}

EmbeddingDataset load_embeddings(const std::filesystem::path& path,
                                 Split split) {
  MatrixFile f = load_matrix_file(path);
  EmbeddingDataset ds;
  ds.embeddings = std::move(f.matrix);
  ds.labels = std::move(f.labels);
  ds.n_classes = f.n_classes;
  ds.split = split;
  validate_embeddings(ds);
  return ds;
}

nlohmann::ordered_json read_json_file(const std::filesystem::path& path) {
  const std::string text = slurp(path);
  try {
    return nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(DataCode::invariant, path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path,
                     const nlohmann::ordered_json& j) {
  spew(path, j.dump(2) + "\n");
}

void require_format(const nlohmann::ordered_json& j, const std::string& format,
                    int version, const std::filesystem::path& path) {
  if (!j.is_object() || j.value("format", "") != format) {
    throw DataError(DataCode::bad_magic,
                    path.string() + ": expected format '" + format + "'");
  }
  if (j.value("version", -1) != version) {
    throw DataError(DataCode::bad_version,
                    path.string() + ": unsupported " + format + " version");
  }
}

void save_library(const std::filesystem::path& json_path,
                  const ConceptLibrary& lib) {
  validate_library(lib);
  const std::filesystem::path mat = sibling_matrix_path(json_path);
  save_matrix_file(mat, lib.vectors);
  nlohmann::ordered_json j;
  j["format"] = "iis-library";
  j["version"] = 1;
  j["kind"] = lib.kind;
  j["names"] = lib.names;
  j["provenance"] = lib.provenance;
  j["matrix"] = mat.filename().string();
  write_json_file(json_path, j);
}

ConceptLibrary load_library(const std::filesystem::path& json_path) {
  nlohmann::ordered_json j = read_json_file(json_path);
  require_format(j, "iis-library", 1, json_path);
  ConceptLibrary lib;
  lib.kind = j.value("kind", "");
  if (!j.contains("names") || !j["names"].is_array()) {
    throw DataError(DataCode::invariant, json_path.string() + ": missing names");
  }
  for (const auto& n : j["names"]) lib.names.push_back(n.get<std::string>());
  lib.provenance = j.value("provenance", nlohmann::ordered_json::object());
  const std::string mat = j.value("matrix", "");
  if (mat.empty()) {
    throw DataError(DataCode::invariant, json_path.string() + ": missing matrix reference");
  }
  lib.vectors = load_matrix_file(resolve_sibling(json_path, mat)).matrix;
  validate_library(lib);
  return lib;
}

void save_soft_labels(const std::filesystem::path& json_path,
                      const SoftLabelMatrix& sl) {
  if (sl.names.size() != std::size_t(sl.scores.cols())) {
    throw DataError(DataCode::invariant, "soft labels: one name per column required");
  }
  const std::filesystem::path mat = sibling_matrix_path(json_path);
  save_matrix_file(mat, sl.scores);
  nlohmann::ordered_json j;
  j["format"] = "iis-softlabels";
  j["version"] = 1;
  j["names"] = sl.names;
  j["matrix"] = mat.filename().string();
  write_json_file(json_path, j);
}

SoftLabelMatrix load_soft_labels(const std::filesystem::path& json_path) {
  nlohmann::ordered_json j = read_json_file(json_path);
  require_format(j, "iis-softlabels", 1, json_path);
  SoftLabelMatrix sl;
  for (const auto& n : j["names"]) sl.names.push_back(n.get<std::string>());
  const std::string mat = j.value("matrix", "");
  if (mat.empty()) {
    throw DataError(DataCode::invariant,
                    json_path.string() + ": missing matrix reference");
  }
  sl.scores = load_matrix_file(resolve_sibling(json_path, mat)).matrix;
  if (sl.names.size() != std::size_t(sl.scores.cols())) {
    throw DataError(DataCode::invariant,
                    json_path.string() + ": name count != score columns");
  }
  if (!sl.scores.allFinite()) {
    throw DataError(DataCode::invariant, json_path.string() + ": non-finite scores");
  }
  return sl;
}

void save_schedule(const std::filesystem::path& path,
                   const SparsitySchedule& sched) {
  validate_schedule(sched);
  nlohmann::ordered_json j;
  j["format"] = "iis-schedule";
  j["version"] = 1;
  j["ratios"] = sched.ratios;
  write_json_file(path, j);
}

SparsitySchedule load_schedule(const std::filesystem::path& path) {
  nlohmann::ordered_json j = read_json_file(path);
  SparsitySchedule sched;
  if (j.is_array()) {
    sched.ratios = j.get<std::vector<double>>();
  } else if (j.is_object() && j.contains("ratios")) {
    sched.ratios = j["ratios"].get<std::vector<double>>();
  } else {
    throw DataError(DataCode::invariant,
                    path.string() + ": expected a ratio array or {\"ratios\": [...]}");
  }
  // Order is not significant on ingest; downstream code wants it sorted.
  std::sort(sched.ratios.begin(), sched.ratios.end());
  validate_schedule(sched);
  return sched;
}

bool is_schedule_preset(const std::string& name) {
  return name == "visual" || name == "text-small" || name == "text-mid" ||
         name == "text-xl";
}

SparsitySchedule preset_schedule(const std::string& name) {
  if (name == "visual") {
    return {{0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.98}};
  }
  if (name == "text-small") {
    return {{0.0, 0.5, 0.7, 0.9, 0.95, 0.97}};
  }
  if (name == "text-mid") {
    return {{0.0, 0.5, 0.7, 0.9, 0.99, 0.995}};
  }
  if (name == "text-xl") {
    return {{0.0, 0.9, 0.99, 0.995, 0.997, 0.999}};
  }
  throw UsageError("unknown schedule preset: " + name);
}

SparsitySchedule text_schedule_for(Eigen::Index m) {
  if (m < 250) return preset_schedule("text-small");
  if (m < 600) return preset_schedule("text-mid");
  if (m < 2000) return preset_schedule("text-small");
  return preset_schedule("text-xl");
}

void save_report(const std::filesystem::path& path, const IISReport& rep) {
  validate_report(rep);
  nlohmann::ordered_json j;
  j["format"] = "iis-report";
  j["version"] = 1;
  j["mode"] = rep.mode;
  j["library"] = {{"kind", rep.library_kind}, {"m", rep.library_m}};
  j["representation_accuracy"] = rep.representation_accuracy;
  j["ratios"] = rep.ratios;
  j["interpretation_accuracies"] = rep.interpretation_accuracies;
  j["arr"] = rep.arr_values;
  j["iis"] = rep.iis;
  j["val_as_test"] = rep.val_as_test;
  if (!rep.cluster_dims.empty()) j["cluster_dims"] = rep.cluster_dims;
  write_json_file(path, j);
}

IISReport load_report(const std::filesystem::path& path) {
  nlohmann::ordered_json j = read_json_file(path);
  require_format(j, "iis-report", 1, path);
  IISReport rep;
  try {
    rep.mode = j.at("mode").get<std::string>();
    rep.library_kind = j.at("library").value("kind", "");
    rep.library_m = j.at("library").value("m", 0);
    rep.representation_accuracy = j.at("representation_accuracy").get<double>();
    rep.ratios = j.at("ratios").get<std::vector<double>>();
    rep.interpretation_accuracies =
        j.at("interpretation_accuracies").get<std::vector<double>>();
    rep.arr_values = j.at("arr").get<std::vector<double>>();
    rep.iis = j.at("iis").get<double>();
    rep.val_as_test = j.value("val_as_test", false);
    if (j.contains("cluster_dims")) {
      rep.cluster_dims = j["cluster_dims"].get<std::vector<int>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataCode::invariant, path.string() + ": " + e.what());
  }
  validate_report(rep);
  return rep;
}

void write_curve_csv(const std::filesystem::path& path, const IISReport& rep) {
  validate_report(rep);
  std::string csv = "sparsity,arr\n";
  for (std::size_t i = 0; i < rep.ratios.size(); ++i) {
    csv += format_double(rep.ratios[i]);
    csv += ',';
    csv += format_double(rep.arr_values[i]);
    csv += '\n';
  }
  spew(path, csv);
}

}  // namespace iis
