#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace apod {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

/// Instance index into a TabularDataset.
using InstanceId = std::int64_t;

// Error kinds shared across modules.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class LogLevel { quiet, warning, info };

void set_log_level(LogLevel level);
LogLevel log_level();
void log_warning(const std::string& message);
void log_info(const std::string& message);

}  // namespace apod
