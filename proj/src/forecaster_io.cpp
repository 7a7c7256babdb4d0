#include <cstdio>
#include <fstream>
#include <sstream>

#include "calibrag/forecaster.hpp"
#include "json.hpp"

namespace calibrag {

namespace {

constexpr int kModelVersion = 1;

void put_number(std::string& out, double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  out += buf;
}

template <typename Derived>
void put_row(std::string& out, const Eigen::DenseBase<Derived>& row) {
  out += '[';
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    put_number(out, row(i));
  }
  out += ']';
}

void put_matrix(std::string& out, const Mat<double>& m, const char* indent) {
  out += '[';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out += r ? ",\n" : "\n";
    out += indent;
    put_row(out, m.row(r));
  }
  out += ']';
}

Vec<double> read_vector(const nlohmann::json& j, Eigen::Index expected, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != expected) {
    throw FormatError(std::string("model field '") + what + "' has the wrong length");
  }
  Vec<double> v(expected);
  for (Eigen::Index i = 0; i < expected; ++i) v[i] = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

Mat<double> read_matrix(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw FormatError(std::string("model field '") + what + "' has the wrong row count");
  }
  Mat<double> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    m.row(r) = read_vector(j[static_cast<std::size_t>(r)], cols, what).transpose();
  }
  return m;
}

}  // namespace

std::string serialize_model(const ForecasterParams<double>& params) {
  params.validate();
  const bool binary = params.kind == HeadKind::binary;
  std::string out = "{\n";
  out += "  \"version\": " + std::to_string(kModelVersion) + ",\n";
  out += std::string("  \"mode\": \"") + (binary ? "binary" : "multi") + "\",\n";
  out += "  \"h\": " + std::to_string(params.h()) + ",\n";
  out += "  \"fourier\": {\"n\": " + std::to_string(params.fourier.n) + ", \"t_min\": ";
  put_number(out, params.fourier.t_min);
  out += ", \"t_max\": ";
  put_number(out, params.fourier.t_max);
  out += "},\n  \"w_p\": ";
  put_matrix(out, params.w_p, "    ");
  out += ",\n  \"head\": {\n";
  if (binary) {
    out += "    \"w\": ";
    put_row(out, params.head_w.row(0));
    out += ",\n    \"b\": ";
    put_number(out, params.head_b[0]);
    out += "\n";
  } else {
    out += "    \"classes\": " + std::to_string(params.classes()) + ",\n    \"w\": ";
    put_matrix(out, params.head_w, "      ");
    out += ",\n    \"b\": ";
    put_row(out, params.head_b);
    out += "\n";
  }
  out += "  }\n}\n";
  return out;
}

ForecasterParams<double> deserialize_model(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != kModelVersion) {
      throw FormatError("unsupported model version " + j.at("version").dump());
    }
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "binary" && mode != "multi") throw FormatError("unknown model mode '" + mode + "'");
    const int h = j.at("h").get<int>();
    FourierSpec fourier{j.at("fourier").at("n").get<int>(), j.at("fourier").at("t_min").get<double>(),
                        j.at("fourier").at("t_max").get<double>()};
    const auto& head = j.at("head");
    const HeadKind kind = mode == "binary" ? HeadKind::binary : HeadKind::multi;
    const int classes = kind == HeadKind::binary ? 1 : head.at("classes").get<int>();
    if (h < 1 || classes < 1 || fourier.n < 1) throw FormatError("model has non-positive dimensions");

    ForecasterParams<double> p;
    p.kind = kind;
    p.fourier = fourier;
    p.w_p = read_matrix(j.at("w_p"), h, fourier.dim(), "w_p");
    if (kind == HeadKind::binary) {
      p.head_w = read_vector(head.at("w"), h, "head.w").transpose();
      p.head_b = Vec<double>::Constant(1, head.at("b").get<double>());
    } else {
      p.head_w = read_matrix(head.at("w"), classes, h, "head.w");
      p.head_b = read_vector(head.at("b"), classes, "head.b");
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model file: ") + e.what());
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("invalid model: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const ForecasterParams<double>& params) {
  const auto text = serialize_model(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ForecasterParams<double> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

}  // namespace calibrag
