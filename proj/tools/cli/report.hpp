#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace adalink::cli {

// A cell keeps its machine form for CSV and a readable form for the text
// table (digit grouping, fixed decimals).
struct Cell {
    std::string raw;
    std::string shown;

    Cell(std::string s) : raw(s), shown(std::move(s)) {}
    Cell(const char *s) : Cell(std::string(s)) {}
    Cell(std::uint64_t v);
    Cell(double v, int decimals = 4);
};

std::string group_digits(std::uint64_t v);

class Table {
   public:
    explicit Table(std::vector<std::string> headers) : headers_(std::move(headers)) {}

    void add(std::vector<Cell> row);
    std::size_t rows() const { return rows_.size(); }

    // Right-aligned columns, one header rule.
    std::string text() const;
    std::string csv() const;
    void write_csv(const std::filesystem::path &path) const;

   private:
    std::vector<std::string> headers_;
    std::vector<std::vector<Cell>> rows_;
};

// One named invariant a command checked.
struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

class CheckList {
   public:
    void add(std::string name, bool passed, std::string detail = {});
    bool all_passed() const;
    const std::vector<Check> &items() const { return checks_; }
    std::string text() const;

   private:
    std::vector<Check> checks_;
};

void write_text(const std::filesystem::path &path, const std::string &text);

}  // namespace adalink::cli
