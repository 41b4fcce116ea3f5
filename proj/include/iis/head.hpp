#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <vector>

#include "iis/common.hpp"

namespace iis {

enum class HeadInputKind { representation, interpretation };

std::string head_input_name(HeadInputKind k);
HeadInputKind head_input_from_name(const std::string& name);

//! Multinomial linear probe: logits = x^T W + b.
struct LinearHead {
  Eigen::MatrixXd weights;  // d x n_classes
  Eigen::VectorXd bias;     // n_classes
  HeadInputKind input_kind = HeadInputKind::representation;
  int n_classes = 0;
  double best_learning_rate = 0.0;
  double val_accuracy = 0.0;
  std::uint64_t seed = 0;
};

Eigen::VectorXd head_logits(const LinearHead& head,
                            const Eigen::Ref<const Eigen::VectorXd>& x);
//! Argmax prediction; ties resolve to the lowest class index.
int head_predict(const LinearHead& head,
                 const Eigen::Ref<const Eigen::VectorXd>& x);

//! Fraction of rows whose argmax matches the label. Errors on empty input.
double accuracy(const LinearHead& head,
                const Eigen::Ref<const Eigen::MatrixXd>& X,
                const std::vector<int>& labels);

//! JSON manifest plus sibling matrix container for the weights.
void save_head(const std::filesystem::path& json_path, const LinearHead& head);
LinearHead load_head(const std::filesystem::path& json_path);

}  // namespace iis
