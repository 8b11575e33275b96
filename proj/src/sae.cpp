#include "saetm/sae.hpp"

namespace saetm::sae {

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::ReluL1: return "relu_l1";
    case ActivationKind::TopK: return "topk";
    case ActivationKind::BatchTopK: return "batch_topk";
  }
  return "unknown";
}

ActivationKind parse_activation_kind(const std::string& name) {
  if (name == "relu_l1") return ActivationKind::ReluL1;
  if (name == "topk") return ActivationKind::TopK;
  if (name == "batch_topk") return ActivationKind::BatchTopK;
  throw Error(ErrorCode::InvalidArgument, "unknown activation '" + name + "' (relu_l1|topk|batch_topk)");
}

}  // namespace saetm::sae
