#include "virda/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "virda/tensor.hpp"

namespace virda {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse " + what + " '" + text + "'");
  }
}

}  // namespace

std::vector<MethodPoint> read_baselines(const std::filesystem::path& path,
                                        const std::string& column) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open baseline table '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("baseline table '" + path.string() + "' is empty");
  const auto header = split_csv(line);
  const auto find = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw ConfigError("baseline table '" + path.string() + "' has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_name = find("method"), c_family = find("family"),
                    c_params = find("train_params_m"), c_acc = find(column);
  std::vector<MethodPoint> points;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw ConfigError(path.string() + ":" + std::to_string(row) + ": expected " +
                        std::to_string(header.size()) + " cells");
    points.push_back({cells[c_name], cells[c_family],
                      parse_number(cells[c_params], "trainable parameters"),
                      parse_number(cells[c_acc], "accuracy")});
  }
  return points;
}

std::vector<bool> pareto_frontier(const std::vector<MethodPoint>& points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].train_params_m != points[b].train_params_m)
      return points[a].train_params_m < points[b].train_params_m;
    return points[a].accuracy > points[b].accuracy;
  });
  std::vector<bool> frontier(points.size(), false);
  double best_smaller = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    while (end < order.size() &&
           points[order[end]].train_params_m == points[order[g]].train_params_m)
      ++end;
    const double group_best = points[order[g]].accuracy;
    for (std::size_t i = g; i < end; ++i) {
      const auto& p = points[order[i]];
      frontier[order[i]] = p.accuracy == group_best && p.accuracy > best_smaller;
    }
    best_smaller = std::max(best_smaller, group_best);
    g = end;
  }
  return frontier;
}

std::string pareto_table(const std::vector<MethodPoint>& points, const std::vector<bool>& frontier) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a].train_params_m < points[b].train_params_m;
  });
  std::ostringstream out;
  out << "| method | family | trainable params (M) | accuracy (%) | frontier |\n"
      << "|---|---|---:|---:|:---:|\n";
  out << std::fixed;
  for (std::size_t i : order) {
    const auto& p = points[i];
    out << "| " << p.name << " | " << p.family << " | " << std::setprecision(1)
        << p.train_params_m << " | " << p.accuracy << " | " << (frontier[i] ? "*" : "") << " |\n";
  }
  return out.str();
}

std::string pareto_svg(const std::vector<MethodPoint>& points, const std::vector<bool>& frontier,
                       const std::string& title) {
  if (points.empty()) throw ConfigError("no points to plot");
  const double w = 640, h = 420, left = 60, right = 20, top = 40, bottom = 50;
  double pmin = points[0].train_params_m, pmax = pmin;
  double amin = points[0].accuracy, amax = amin;
  for (const auto& p : points) {
    pmin = std::min(pmin, p.train_params_m);
    pmax = std::max(pmax, p.train_params_m);
    amin = std::min(amin, p.accuracy);
    amax = std::max(amax, p.accuracy);
  }
  const double lx0 = std::log10(std::max(pmin, 1e-3)) - 0.1;
  const double lx1 = std::log10(std::max(pmax, 1e-3)) + 0.1;
  const double ay0 = std::floor(amin - 1), ay1 = std::ceil(amax + 1);
  const auto sx = [&](double v) {
    return left + (std::log10(std::max(v, 1e-3)) - lx0) / (lx1 - lx0) * (w - left - right);
  };
  const auto sy = [&](double v) { return top + (ay1 - v) / (ay1 - ay0) * (h - top - bottom); };

  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
      << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\""
      << h - bottom << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
      << h - bottom << "\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(std::ceil(lx0)); e <= static_cast<int>(std::floor(lx1)); ++e) {
    const double v = std::pow(10.0, e);
    out << "<text x=\"" << sx(v) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\">"
        << std::setprecision(e < 0 ? -e : 0) << v << std::setprecision(1) << "</text>\n";
  }
  for (double a = ay0; a <= ay1; a += 2) {
    out << "<text x=\"" << left - 6 << "\" y=\"" << sy(a) + 4 << "\" text-anchor=\"end\">" << a
        << "</text>\n";
  }
  out << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12
      << "\" text-anchor=\"middle\">trainable parameters (M, log scale)</text>\n";
  out << "<text x=\"14\" y=\"" << (top + h - bottom) / 2 << "\" transform=\"rotate(-90 14 "
      << (top + h - bottom) / 2 << ")\" text-anchor=\"middle\">accuracy (%)</text>\n";

  std::vector<std::size_t> front;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (frontier[i]) front.push_back(i);
  std::sort(front.begin(), front.end(), [&](std::size_t a, std::size_t b) {
    return points[a].train_params_m < points[b].train_params_m;
  });
  if (!front.empty()) {
    out << "<polyline fill=\"none\" stroke=\"#c33\" stroke-dasharray=\"4 3\" points=\"";
    for (std::size_t k = 0; k < front.size(); ++k) {
      const auto& p = points[front[k]];
      if (k > 0) out << sx(p.train_params_m) << "," << sy(points[front[k - 1]].accuracy) << " ";
      out << sx(p.train_params_m) << "," << sy(p.accuracy) << " ";
    }
    out << "\"/>\n";
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    out << "<circle cx=\"" << sx(p.train_params_m) << "\" cy=\"" << sy(p.accuracy) << "\" r=\""
        << (frontier[i] ? 5 : 3.5) << "\" fill=\"" << (frontier[i] ? "#c33" : "#467") << "\"/>\n";
    out << "<text x=\"" << sx(p.train_params_m) + 6 << "\" y=\"" << sy(p.accuracy) - 5 << "\">"
        << p.name << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace virda
