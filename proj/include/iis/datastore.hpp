#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "iis/common.hpp"

namespace iis {

enum class Split { train, val, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct EmbeddingDataset {
  Eigen::MatrixXd embeddings;  // n x d, one sample per row
  std::vector<int> labels;
  int n_classes = 0;
  Split split = Split::train;
};

//! Concept vectors live in rows (m x d), pairing each with a name.
//! `kind` is one of: prototype, cluster, end2end, text, planted.
struct ConceptLibrary {
  Eigen::MatrixXd vectors;
  std::vector<std::string> names;
  std::string kind;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  Eigen::Index m() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
};

//! Per-concept soft labels for text fitting: scores is n x m, one column
//! per named concept.
struct SoftLabelMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd scores;
};

struct SparsitySchedule {
  std::vector<double> ratios;  // strictly increasing, each in [0, 1)
};

struct IISReport {
  std::string mode;  // ascending | descending | hard_threshold | clustering
  std::string library_kind;
  Eigen::Index library_m = 0;
  double representation_accuracy = 0.0;
  std::vector<double> ratios;
  std::vector<double> interpretation_accuracies;
  std::vector<double> arr_values;
  double iis = 0.0;
  bool val_as_test = false;
  std::vector<int> cluster_dims;  // clustering mode: reduced dim per ratio
};

void validate_embeddings(const EmbeddingDataset& ds);
void validate_library(const ConceptLibrary& lib);
void validate_schedule(const SparsitySchedule& sched);
void validate_report(const IISReport& rep);

// ---------------------------------------------------------------------------
// Matrix container. Little-endian binary layout:
//   bytes 0-3   magic "IISE"
//   u32         version (1)
//   u64         rows
//   u64         cols
//   u8          dtype (0 = float32)
//   f32 x r*c   payload, row-major
//   u64         label count (0 when unlabeled)
//   u32 x count labels
//   u32         class count (0 when unlabeled)
// Values are float64 in memory and float32 at rest.
// ---------------------------------------------------------------------------

struct MatrixFile {
  Eigen::MatrixXd matrix;
  std::vector<int> labels;
  int n_classes = 0;
};

void save_matrix_file(const std::filesystem::path& path,
                      const Eigen::Ref<const Eigen::MatrixXd>& matrix,
                      const std::vector<int>& labels = {}, int n_classes = 0);
MatrixFile load_matrix_file(const std::filesystem::path& path);

void save_embeddings(const std::filesystem::path& path,
                     const EmbeddingDataset& ds);
EmbeddingDataset load_embeddings(const std::filesystem::path& path,
                                 Split split = Split::train);

//! Library persists as a JSON manifest plus a sibling matrix container
//! (same stem, .iise extension).
void save_library(const std::filesystem::path& json_path,
                  const ConceptLibrary& lib);
ConceptLibrary load_library(const std::filesystem::path& json_path);

void save_soft_labels(const std::filesystem::path& json_path,
                      const SoftLabelMatrix& sl);
SoftLabelMatrix load_soft_labels(const std::filesystem::path& json_path);

void save_schedule(const std::filesystem::path& path,
                   const SparsitySchedule& sched);
//! Accepts either {"ratios": [...]} or a bare JSON array.
SparsitySchedule load_schedule(const std::filesystem::path& path);

//! Named grids: "visual", "text-small", "text-mid", "text-xl".
bool is_schedule_preset(const std::string& name);
SparsitySchedule preset_schedule(const std::string& name);
//! Text grid picked by concept count (denser tails for larger libraries).
SparsitySchedule text_schedule_for(Eigen::Index m);

void save_report(const std::filesystem::path& path, const IISReport& rep);
IISReport load_report(const std::filesystem::path& path);

//! Two-column CSV (sparsity, arr) of the report's curve.
void write_curve_csv(const std::filesystem::path& path, const IISReport& rep);

// Shared helpers for sibling-manifest formats.
nlohmann::ordered_json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path,
                     const nlohmann::ordered_json& j);
void require_format(const nlohmann::ordered_json& j, const std::string& format,
                    int version, const std::filesystem::path& path);

}  // namespace iis
