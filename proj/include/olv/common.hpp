#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace olv {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = MatX<float>;
using VecF = VecX<float>;
using MatD = MatX<double>;
using VecD = VecX<double>;

enum class ErrorKind {
  Usage,       // bad arguments / bad configuration
  Data,        // malformed or inconsistent input data
  Preprocess,  // preprocessing cannot proceed (e.g. all-missing channel)
  Spectral,    // wavelet transform preconditions violated
  Model,       // shape or mode mismatch inside the network
  Checkpoint,  // unreadable / incompatible checkpoint file
  Training,    // optimization failure (divergence, ...)
  Inference,   // sliding-window scoring preconditions violated
  Baseline,    // change-point detector cannot produce a result
  Eval,        // evaluation on empty or inconsistent inputs
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message, std::string context = "")
      : std::runtime_error(context.empty() ? message : message + " [" + context + "]"),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  // CLI exit-code contract: 1 usage, 2 data, 3 everything downstream.
  int exit_code() const {
    switch (kind_) {
      case ErrorKind::Usage: return 1;
      case ErrorKind::Data:
      case ErrorKind::Preprocess: return 2;
      default: return 3;
    }
  }

 private:
  ErrorKind kind_;
};

}  // namespace olv
