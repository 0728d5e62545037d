#ifndef VIRDA_PARETO_HPP_
#define VIRDA_PARETO_HPP_

#include <filesystem>
#include <string>
#include <vector>

namespace virda {

struct MethodPoint {
  std::string name;
  std::string family;
  double train_params_m = 0.0;
  double accuracy = 0.0;
};

/// Reads a baseline table (header: method,family,param_size_m,train_params_m,
/// <task columns>...,mean) and takes accuracy from `column`.
std::vector<MethodPoint> read_baselines(const std::filesystem::path& path,
                                        const std::string& column = "mean");

/// frontier[i] is true when no other point has fewer-or-equal trainable
/// parameters and higher-or-equal accuracy with at least one strict.
std::vector<bool> pareto_frontier(const std::vector<MethodPoint>& points);

/// Markdown table sorted by trainable parameters, frontier points starred.
std::string pareto_table(const std::vector<MethodPoint>& points, const std::vector<bool>& frontier);

/// Scatter plot (log-scaled parameter axis) with the frontier drawn as a step line.
std::string pareto_svg(const std::vector<MethodPoint>& points, const std::vector<bool>& frontier,
                       const std::string& title);

}  // namespace virda

#endif  // VIRDA_PARETO_HPP_
