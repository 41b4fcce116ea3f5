#include "iis/head.hpp"

#include "iis/datastore.hpp"

namespace iis {

std::string head_input_name(HeadInputKind k) {
  return k == HeadInputKind::representation ? "representation" : "interpretation";
}

HeadInputKind head_input_from_name(const std::string& name) {
  if (name == "representation") return HeadInputKind::representation;
  if (name == "interpretation") return HeadInputKind::interpretation;
  throw UsageError("unknown head input kind: " + name);
}

Eigen::VectorXd head_logits(const LinearHead& head,
                            const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != head.weights.rows()) {
    throw UsageError("head: input dimension mismatch");
  }
  return head.weights.transpose() * x + head.bias;
}

int head_predict(const LinearHead& head,
                 const Eigen::Ref<const Eigen::VectorXd>& x) {
  Eigen::VectorXd z = head_logits(head, x);
  int best = 0;
  for (Eigen::Index c = 1; c < z.size(); ++c) {
    if (z(c) > z(best)) best = int(c);
  }
  return best;
}

double accuracy(const LinearHead& head,
                const Eigen::Ref<const Eigen::MatrixXd>& X,
                const std::vector<int>& labels) {
  if (X.rows() == 0) throw UsageError("accuracy: empty evaluation set");
  if (labels.size() != std::size_t(X.rows())) {
    throw UsageError("accuracy: one label per row required");
  }
  if (X.cols() != head.weights.rows()) {
    throw UsageError("accuracy: input dimension mismatch");
  }
  Eigen::MatrixXd z = X * head.weights;
  z.rowwise() += head.bias.transpose();
  int hits = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (Eigen::Index c = 1; c < z.cols(); ++c) {
      if (z(i, c) > z(i, best)) best = int(c);
    }
    if (best == labels[std::size_t(i)]) ++hits;
  }
  return double(hits) / double(z.rows());
}

void save_head(const std::filesystem::path& json_path, const LinearHead& head) {
  if (head.weights.cols() != head.n_classes ||
      head.bias.size() != head.n_classes || head.n_classes < 1) {
    throw DataError(DataCode::invariant, "head: inconsistent class count");
  }
  std::filesystem::path mat = json_path;
  mat.replace_extension(".iise");
  save_matrix_file(mat, head.weights);
  nlohmann::ordered_json j;
  j["format"] = "iis-head";
  j["version"] = 1;
  j["input_kind"] = head_input_name(head.input_kind);
  j["n_classes"] = head.n_classes;
  j["bias"] = std::vector<double>(head.bias.data(),
                                  head.bias.data() + head.bias.size());
  j["best_learning_rate"] = head.best_learning_rate;
  j["val_accuracy"] = head.val_accuracy;
  j["seed"] = head.seed;
  j["matrix"] = mat.filename().string();
  write_json_file(json_path, j);
}

LinearHead load_head(const std::filesystem::path& json_path) {
  nlohmann::ordered_json j = read_json_file(json_path);
  require_format(j, "iis-head", 1, json_path);
  LinearHead head;
  try {
    head.input_kind = head_input_from_name(j.at("input_kind").get<std::string>());
    head.n_classes = j.at("n_classes").get<int>();
    auto bias = j.at("bias").get<std::vector<double>>();
    head.bias = Eigen::Map<Eigen::VectorXd>(bias.data(), Eigen::Index(bias.size()));
    head.best_learning_rate = j.value("best_learning_rate", 0.0);
    head.val_accuracy = j.value("val_accuracy", 0.0);
    head.seed = j.value("seed", std::uint64_t(0));
    std::filesystem::path mat(j.at("matrix").get<std::string>());
    if (!mat.is_absolute()) mat = json_path.parent_path() / mat;
    head.weights = load_matrix_file(mat).matrix;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataCode::invariant, json_path.string() + ": " + e.what());
  }
  if (head.weights.cols() != head.n_classes ||
      head.bias.size() != head.n_classes || head.n_classes < 1) {
    throw DataError(DataCode::invariant,
                    json_path.string() + ": inconsistent head shapes");
  }
  return head;
}

}  // namespace iis
