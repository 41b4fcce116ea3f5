#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <vector>

#include "iis/autodiff.hpp"
#include "iis/common.hpp"
#include "iis/datastore.hpp"
#include "iis/evaluator.hpp"
#include "iis/head.hpp"

namespace iis {

enum class AdapterKind { linear, mlp };

//! Trainable map over frozen embeddings, standing in for backbone
//! fine-tuning. The linear kind starts as the exact identity.
struct Adapter {
  AdapterKind kind = AdapterKind::linear;
  std::vector<Eigen::MatrixXd> params;

  static Adapter identity_linear(Eigen::Index d);
  static Adapter make_mlp(Eigen::Index d, RandomSource& rng);

  Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& x) const;
  //! Same map expressed on a tape; `leaves` must hold the parameters in
  //! the order of `params`.
  ad::Value apply_graph(ad::Tape& t, const std::vector<ad::Value>& leaves,
                        ad::Value x) const;
};

struct FinetuneConfig {
  double s = 0.1;              // fixed sparsity of the surrogate term
  Eigen::Index concept_dim = 200;  // M_l
  AdapterKind adapter = AdapterKind::linear;
  bool identity_concepts = false;  // C_l starts as an identity-like map
  bool freeze_concepts = false;
  int epochs = 100;
  int batch_size = 128;
  double learning_rate = 3e-4;
  double weight_decay = 0.3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double warmup_frac = 0.1;
  int head_warmup_epochs = 5;  // pre-fit of both heads before the joint loop
  std::vector<int> snapshot_epochs;  // epoch 0 and the final epoch always kept
  std::uint64_t seed = 0;
};

struct TraceRow {
  int epoch = 0;
  double acc_dense = 0.0;
  double acc_sparse = 0.0;
  double ratio = 0.0;   // acc_sparse / acc_dense, the simplified score
  double loss = 0.0;    // mean joint objective over the epoch
};

struct FinetuneSnapshot {
  int epoch = 0;
  Adapter adapter;
  Eigen::MatrixXd concept_matrix;
  LinearHead dense_head;
  LinearHead sparse_head;
};

struct FinetuneResult {
  Adapter adapter;
  Eigen::MatrixXd concept_matrix;  // d x M_l
  LinearHead dense_head;
  LinearHead sparse_head;
  std::vector<TraceRow> trace;     // row 0 is the warm state before training
  std::vector<FinetuneSnapshot> snapshots;
  bool diverged = false;
};

//! Builds the joint objective on a tape: cross-entropy of the dense head
//! on adapted features plus cross-entropy of the sparse head on the
//! soft-thresholded learnable-concept projection. `leaves` holds
//! [adapter params..., C_l, W_h, b_h, W_g, b_g]. The soft-threshold cutoff
//! is a stop-gradient; pass `frozen_cutoffs` to pin it for gradient checks.
ad::Value joint_objective_graph(ad::Tape& t, AdapterKind kind,
                                const std::vector<ad::Value>& leaves,
                                const Eigen::MatrixXd& x,
                                const std::vector<int>& y, double s,
                                const Eigen::VectorXd* frozen_cutoffs = nullptr);

//! Minimizes the unweighted sum of both head losses over the adapter, C_l,
//! and both heads (AdamW, cosine decay with warmup). Aborts after three
//! consecutive epochs with loss above 10x the warm-state loss.
FinetuneResult finetune_iis(const EmbeddingDataset& train,
                            const EmbeddingDataset& val,
                            const FinetuneConfig& cfg);

struct AlignmentRow {
  int epoch = 0;
  double accuracy = 0.0;        // representation-head accuracy after adaptation
  double simplified_iis = 0.0;  // sparse/dense accuracy ratio at the fixed s
  double original_iis = 0.0;    // full compute_iis on adapted embeddings
};

//! Re-scores every snapshot with the full pipeline against a fixed library
//! and schedule.
std::vector<AlignmentRow> track_iis_alignment(
    const FinetuneResult& result, const EmbeddingDataset& train,
    const EmbeddingDataset& val, const EmbeddingDataset* test,
    const ConceptLibrary& lib, const SparsitySchedule& schedule,
    SparsifyMode mode, const IisConfig& cfg);

//! CSV with header "epoch,acc_dense,acc_sparse,ratio".
void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<TraceRow>& trace);

}  // namespace iis
