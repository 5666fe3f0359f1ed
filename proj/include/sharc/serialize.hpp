// sharc/serialize.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef SHARC_SERIALIZE_HPP
#define SHARC_SERIALIZE_HPP

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sharc::blob {

// Versioned text container for model state: named scalars, strings and
// shape-checked matrices. Doubles are printed with 17 significant digits so
// that read(write(x)) reproduces every bit. Entries are kept in sorted order,
// making the serialized form a pure function of the content.
struct Blob {
  std::string kind;
  int version = 1;
  std::map<std::string, double> scalars;
  std::map<std::string, std::string> strings;
  std::map<std::string, Eigen::MatrixXd> matrices;

  static std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }

  void write(std::ostream& os) const {
    os << "sharc-blob v" << version << " kind=" << kind << "\n";
    for (const auto& [k, v] : strings) os << "string " << k << " " << v << "\n";
    for (const auto& [k, v] : scalars)
      os << "scalar " << k << " " << format_double(v) << "\n";
    for (const auto& [k, m] : matrices) {
      os << "matrix " << k << " " << m.rows() << " " << m.cols() << "\n";
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          if (c) os << " ";
          os << format_double(m(r, c));
        }
        os << "\n";
      }
    }
    os << "end\n";
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    write(f);
    f.flush();
    if (!f) throw std::runtime_error("write failed: " + path);
  }

  static Blob read(std::istream& is, const std::string& origin = "<stream>") {
    Blob b;
    std::string line;
    if (!std::getline(is, line))
      throw std::runtime_error(origin + ": empty blob");
    {
      std::istringstream hs(line);
      std::string magic, kindfield;
      hs >> magic >> kindfield;
      if (magic != "sharc-blob" || kindfield.rfind("kind=", 0) != 0)
        throw std::runtime_error(origin + ": bad blob header: " + line);
      b.kind = kindfield.substr(5);
      b.version = 1;
    }
    while (std::getline(is, line)) {
      if (line == "end") return b;
      std::istringstream ls(line);
      std::string tag, name;
      ls >> tag >> name;
      if (tag == "string") {
        std::string rest;
        std::getline(ls, rest);
        if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
        b.strings[name] = rest;
      } else if (tag == "scalar") {
        double v;
        if (!(ls >> v))
          throw std::runtime_error(origin + ": bad scalar line: " + line);
        b.scalars[name] = v;
      } else if (tag == "matrix") {
        Eigen::Index rows, cols;
        if (!(ls >> rows >> cols) || rows < 0 || cols < 0)
          throw std::runtime_error(origin + ": bad matrix line: " + line);
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
          if (!std::getline(is, line))
            throw std::runtime_error(origin + ": truncated matrix " + name);
          std::istringstream rs(line);
          for (Eigen::Index c = 0; c < cols; ++c) {
            if (!(rs >> m(r, c)))
              throw std::runtime_error(origin + ": short row in matrix " +
                                       name);
          }
        }
        b.matrices[name] = std::move(m);
      } else {
        throw std::runtime_error(origin + ": unknown blob tag: " + tag);
      }
    }
    throw std::runtime_error(origin + ": missing end marker");
  }

  static Blob load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    return read(f, path);
  }

  const Eigen::MatrixXd& matrix(const std::string& name) const {
    auto it = matrices.find(name);
    if (it == matrices.end())
      throw std::runtime_error("blob missing matrix: " + name);
    return it->second;
  }

  double scalar(const std::string& name) const {
    auto it = scalars.find(name);
    if (it == scalars.end())
      throw std::runtime_error("blob missing scalar: " + name);
    return it->second;
  }

  double scalar_or(const std::string& name, double fallback) const {
    auto it = scalars.find(name);
    return it == scalars.end() ? fallback : it->second;
  }
};

}  // namespace sharc::blob

#endif  // SHARC_SERIALIZE_HPP
