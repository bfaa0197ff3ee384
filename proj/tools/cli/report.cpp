#include "report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "adalink/errors.hpp"

namespace adalink::cli {

std::string group_digits(std::uint64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

Cell::Cell(std::uint64_t v) : raw(std::to_string(v)), shown(group_digits(v)) {}

Cell::Cell(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    raw = buf;
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    shown = buf;
}

void Table::add(std::vector<Cell> row) {
    if (row.size() != headers_.size()) {
        throw ContractError("table row has " + std::to_string(row.size()) + " cells, expected " +
                            std::to_string(headers_.size()));
    }
    rows_.push_back(std::move(row));
}

std::string Table::text() const {
    std::vector<std::size_t> width(headers_.size());
    for (std::size_t c = 0; c < headers_.size(); ++c) {
        width[c] = headers_[c].size();
        for (const auto &r : rows_) width[c] = std::max(width[c], r[c].shown.size());
    }
    std::ostringstream os;
    auto line = [&](auto cell_of) {
        for (std::size_t c = 0; c < headers_.size(); ++c) {
            const std::string s = cell_of(c);
            os << (c ? "  " : "") << std::string(width[c] - s.size(), ' ') << s;
        }
        os << '\n';
    };
    line([&](std::size_t c) { return headers_[c]; });
    line([&](std::size_t c) { return std::string(width[c], '-'); });
    for (const auto &r : rows_) line([&](std::size_t c) { return r[c].shown; });
    return os.str();
}

namespace {

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out.push_back('"');
        out.push_back(ch);
    }
    return out + "\"";
}

}  // namespace

std::string Table::csv() const {
    std::ostringstream os;
    for (std::size_t c = 0; c < headers_.size(); ++c) os << (c ? "," : "") << csv_field(headers_[c]);
    os << '\n';
    for (const auto &r : rows_) {
        for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << csv_field(r[c].raw);
        os << '\n';
    }
    return os.str();
}

void Table::write_csv(const std::filesystem::path &path) const { write_text(path, csv()); }

void CheckList::add(std::string name, bool passed, std::string detail) {
    checks_.push_back({std::move(name), passed, std::move(detail)});
}

bool CheckList::all_passed() const {
    return std::all_of(checks_.begin(), checks_.end(), [](const Check &c) { return c.passed; });
}

std::string CheckList::text() const {
    std::ostringstream os;
    for (const auto &c : checks_) {
        os << (c.passed ? "ok    " : "FAIL  ") << c.name;
        if (!c.detail.empty()) os << " (" << c.detail << ")";
        os << '\n';
    }
    return os.str();
}

void write_text(const std::filesystem::path &path, const std::string &text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
}

}  // namespace adalink::cli
