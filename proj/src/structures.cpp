#include "optrad/structures.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "optrad/error.hpp"
#include "optrad/io.hpp"

namespace optrad {

namespace {

const std::array<std::string, 104> kSymbols = {
    "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na",
    "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",
    "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br",
    "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag",
    "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu",
    "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi",
    "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am",
    "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr"};

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

bool parse_double(const std::string& tok, double& out) {
  const char* begin = tok.data();
  const char* end = tok.data() + tok.size();
  if (begin != end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

// key=value pairs; values may be double-quoted and contain spaces.
std::vector<std::pair<std::string, std::string>> parse_comment(
    const std::string& line, std::size_t frame, std::size_t lineno) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t i = 0;
  const auto n = line.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= n) break;
    std::size_t key_start = i;
    while (i < n && line[i] != '=' &&
           !std::isspace(static_cast<unsigned char>(line[i])))
      ++i;
    std::string key = line.substr(key_start, i - key_start);
    if (i >= n || line[i] != '=') {
      // bare word (flag); ignored
      continue;
    }
    ++i;  // '='
    std::string value;
    if (i < n && line[i] == '"') {
      ++i;
      auto close = line.find('"', i);
      if (close == std::string::npos) {
        throw ParseError(frame, lineno, "unterminated quote for key '" + key +
                                            "'");
      }
      value = line.substr(i, close - i);
      i = close + 1;
    } else {
      std::size_t vs = i;
      while (i < n && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      value = line.substr(vs, i - vs);
    }
    out.emplace_back(key, value);
  }
  return out;
}

struct Column {
  std::string name;
  char type;
  int count;
};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

int atomic_number(const std::string& symbol) {
  for (std::size_t z = 1; z < kSymbols.size(); ++z) {
    if (kSymbols[z] == symbol) return static_cast<int>(z);
  }
  return 0;
}

const std::string& element_symbol(int z) {
  if (z < 1 || z >= static_cast<int>(kSymbols.size())) {
    throw ValidationError("structures",
                          "no element symbol for Z=" + std::to_string(z));
  }
  return kSymbols[static_cast<std::size_t>(z)];
}

void Structure::validate() const {
  if (positions.size() != species.size()) {
    throw ValidationError("structures",
                          "positions and species have different lengths");
  }
  if (periodic() && std::abs(cell.determinant()) <= 1e-10) {
    throw ValidationError("structures", "periodic structure has singular cell");
  }
  if (forces && forces->size() != positions.size()) {
    throw ValidationError("structures", "forces and positions differ in length");
  }
}

std::vector<Structure> parse_extxyz(const std::string& text) {
  std::vector<std::string> lines;
  {
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  std::vector<Structure> frames;
  std::size_t pos = 0;
  while (pos < lines.size()) {
    if (split_ws(lines[pos]).empty()) {
      ++pos;
      continue;
    }
    const std::size_t frame = frames.size();
    const std::size_t count_line = pos + 1;
    const auto count_tokens = split_ws(lines[pos]);
    long long natoms = -1;
    {
      const auto& t = count_tokens[0];
      auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), natoms);
      if (count_tokens.size() != 1 || ec != std::errc() ||
          ptr != t.data() + t.size() || natoms < 0) {
        throw ParseError(frame, count_line,
                         "malformed atom count '" + lines[pos] + "'");
      }
    }
    if (pos + 1 >= lines.size()) {
      throw ParseError(frame, count_line + 1, "missing comment line");
    }
    const std::size_t comment_line = pos + 2;
    Structure s;
    std::vector<Column> columns = {{"species", 'S', 1}, {"pos", 'R', 3}};
    bool pbc_given = false;
    bool lattice_given = false;
    for (const auto& [key, value] : parse_comment(lines[pos + 1], frame,
                                                  comment_line)) {
      const auto lkey = lower(key);
      if (lkey == "lattice") {
        const auto toks = split_ws(value);
        if (toks.size() != 9) {
          throw ParseError(frame, comment_line, "Lattice needs 9 numbers");
        }
        for (int k = 0; k < 9; ++k) {
          double v;
          if (!parse_double(toks[static_cast<std::size_t>(k)], v)) {
            throw ParseError(frame, comment_line, "bad Lattice entry");
          }
          s.cell(k / 3, k % 3) = v;
        }
        lattice_given = true;
      } else if (lkey == "pbc") {
        const auto toks = split_ws(value);
        if (toks.size() != 3) {
          throw ParseError(frame, comment_line, "pbc needs 3 flags");
        }
        for (int k = 0; k < 3; ++k) {
          const auto t = lower(toks[static_cast<std::size_t>(k)]);
          s.pbc[static_cast<std::size_t>(k)] = (t == "t" || t == "true" ||
                                                t == "1");
        }
        pbc_given = true;
      } else if (lkey == "properties") {
        columns.clear();
        std::vector<std::string> parts;
        std::stringstream ps(value);
        std::string part;
        while (std::getline(ps, part, ':')) parts.push_back(part);
        if (parts.size() % 3 != 0) {
          throw ParseError(frame, comment_line, "malformed Properties");
        }
        for (std::size_t k = 0; k < parts.size(); k += 3) {
          int cnt = 0;
          auto [ptr, ec] = std::from_chars(
              parts[k + 2].data(), parts[k + 2].data() + parts[k + 2].size(),
              cnt);
          if (ec != std::errc() || cnt <= 0 || parts[k + 1].size() != 1) {
            throw ParseError(frame, comment_line, "malformed Properties");
          }
          columns.push_back({parts[k], parts[k + 1][0], cnt});
        }
      } else {
        double v;
        if (parse_double(value, v)) {
          if (lkey == "energy") {
            s.energy = v;
          } else {
            s.scalars[key] = v;
          }
        }
      }
    }
    if (lattice_given && !pbc_given) s.pbc = {true, true, true};

    int total_cols = 0;
    int species_col = -1, pos_col = -1, forces_col = -1;
    for (const auto& c : columns) {
      const auto lname = lower(c.name);
      if (lname == "species") species_col = total_cols;
      if (lname == "pos") pos_col = total_cols;
      if (lname == "forces" || lname == "force") forces_col = total_cols;
      total_cols += c.count;
    }
    if (species_col < 0 || pos_col < 0) {
      throw ParseError(frame, comment_line,
                       "Properties must contain species and pos");
    }
    if (forces_col >= 0) s.forces = std::vector<Vec3>{};
    for (long long a = 0; a < natoms; ++a) {
      const std::size_t li = pos + 2 + static_cast<std::size_t>(a);
      const std::size_t lineno = li + 1;
      if (li >= lines.size()) {
        throw ParseError(frame, lineno, "unexpected end of file");
      }
      const auto toks = split_ws(lines[li]);
      if (static_cast<int>(toks.size()) != total_cols) {
        throw ParseError(frame, lineno,
                         "expected " + std::to_string(total_cols) +
                             " columns, found " + std::to_string(toks.size()));
      }
      const auto& sym = toks[static_cast<std::size_t>(species_col)];
      int z = atomic_number(sym);
      if (z == 0) {
        throw ParseError(frame, lineno, "unknown element '" + sym + "'");
      }
      auto read3 = [&](int col) {
        Vec3 v;
        for (int k = 0; k < 3; ++k) {
          if (!parse_double(toks[static_cast<std::size_t>(col + k)], v[k])) {
            throw ParseError(frame, lineno, "bad number '" +
                                                toks[static_cast<std::size_t>(
                                                    col + k)] +
                                                "'");
          }
        }
        return v;
      };
      s.species.push_back(z);
      s.positions.push_back(read3(pos_col));
      if (forces_col >= 0) s.forces->push_back(read3(forces_col));
    }
    try {
      s.validate();
    } catch (const ValidationError& e) {
      throw ParseError(frame, comment_line, e.what());
    }
    frames.push_back(std::move(s));
    pos += 2 + static_cast<std::size_t>(natoms);
  }
  return frames;
}

std::vector<Structure> read_extxyz(const std::string& path) {
  return parse_extxyz(read_text_file(path));
}

std::string write_extxyz(const std::vector<Structure>& frames) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& s : frames) {
    out << s.size() << '\n';
    out << "Lattice=\"";
    for (int k = 0; k < 9; ++k) {
      out << (k ? " " : "") << s.cell(k / 3, k % 3);
    }
    out << "\" Properties=species:S:1:pos:R:3";
    if (s.forces) out << ":forces:R:3";
    if (s.energy) out << " energy=" << *s.energy;
    for (const auto& [k, v] : s.scalars) out << ' ' << k << '=' << v;
    out << " pbc=\"" << (s.pbc[0] ? 'T' : 'F') << ' ' << (s.pbc[1] ? 'T' : 'F')
        << ' ' << (s.pbc[2] ? 'T' : 'F') << "\"\n";
    for (std::size_t a = 0; a < s.size(); ++a) {
      out << element_symbol(s.species[a]);
      for (int k = 0; k < 3; ++k) out << ' ' << s.positions[a][k];
      if (s.forces) {
        for (int k = 0; k < 3; ++k) out << ' ' << (*s.forces)[a][k];
      }
      out << '\n';
    }
  }
  return out.str();
}

std::vector<Environment> neighbor_list(const Structure& s, double rcut,
                                       std::size_t structure_id) {
  if (!(rcut > 0)) {
    throw ValidationError("structures", "rcut must be positive");
  }
  s.validate();
  // Pair differences are first wrapped to fractional coordinates in
  // [-0.5, 0.5) along periodic axes, so ceil(rcut / height + 1/2) images per
  // axis reach every neighbor within rcut.
  std::array<int, 3> reps{0, 0, 0};
  Mat3 inv_cell = Mat3::Identity();
  if (s.periodic()) {
    inv_cell = s.cell.inverse();
    const double volume = std::abs(s.cell.determinant());
    for (int k = 0; k < 3; ++k) {
      if (!s.pbc[static_cast<std::size_t>(k)]) continue;
      const Vec3 cross =
          s.cell.row((k + 1) % 3).cross(s.cell.row((k + 2) % 3)).transpose();
      const double height = volume / cross.norm();
      reps[static_cast<std::size_t>(k)] =
          static_cast<int>(std::ceil(rcut / height + 0.5));
    }
  }
  std::vector<Vec3> shifts;
  for (int a = -reps[0]; a <= reps[0]; ++a)
    for (int b = -reps[1]; b <= reps[1]; ++b)
      for (int c = -reps[2]; c <= reps[2]; ++c)
        shifts.push_back((a * s.cell.row(0) + b * s.cell.row(1) +
                          c * s.cell.row(2))
                             .transpose());

  std::vector<Environment> envs(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& env = envs[i];
    env.structure_id = structure_id;
    env.center = static_cast<int>(i);
    env.center_species = s.species[i];
    for (std::size_t j = 0; j < s.size(); ++j) {
      Vec3 base = s.positions[j] - s.positions[i];
      if (s.periodic()) {
        // fractional = base^T * inv(cell)
        Vec3 frac = (base.transpose() * inv_cell).transpose();
        for (int k = 0; k < 3; ++k) {
          if (s.pbc[static_cast<std::size_t>(k)]) {
            frac[k] -= std::floor(frac[k] + 0.5);
          }
        }
        base = (frac.transpose() * s.cell).transpose();
      }
      for (const auto& shift : shifts) {
        const Vec3 rv = base + shift;
        const double r = rv.norm();
        if (r > 0.0 && r <= rcut) {
          env.neighbors.push_back(
              {s.species[j], rv, r, static_cast<int>(j)});
        }
      }
    }
  }
  return envs;
}

Structure apply_rotation(const Structure& s, const Mat3& R) {
  if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-12) {
    throw ValidationError("structures", "rotation matrix is not orthogonal");
  }
  Structure out = s;
  for (auto& p : out.positions) p = R * p;
  out.cell = s.cell * R.transpose();
  if (out.forces) {
    for (auto& f : *out.forces) f = R * f;
  }
  return out;
}

Mat3 rotation_from_uniform(double u1, double u2, double u3) {
  const double two_pi = 2.0 * std::numbers::pi;
  const Eigen::Quaterniond q(std::sqrt(u1) * std::cos(two_pi * u3),
                             std::sqrt(1 - u1) * std::sin(two_pi * u2),
                             std::sqrt(1 - u1) * std::cos(two_pi * u2),
                             std::sqrt(u1) * std::sin(two_pi * u3));
  return q.normalized().toRotationMatrix();
}

}  // namespace optrad
