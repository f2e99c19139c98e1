#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace sinklab {

// Typed table with an exact CSV round-trip: the header line declares the
// column schema ("name:type"), doubles are written in shortest round-trip
// form, and parse_csv(emit_csv(t)) reproduces the table bit-for-bit.
struct Table {
    using Cell = std::variant<std::int64_t, double, std::string>;

    std::vector<std::string> columns;
    std::vector<char> types;  // 'i', 'r', 's' per column
    std::vector<std::vector<Cell>> rows;

    void add_row(std::vector<Cell> row);
};

Table make_table(const std::vector<std::pair<std::string, char>>& schema);

std::string emit_csv(const Table& table);
Table parse_csv(const std::string& text);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// Aligned fixed-width rendering for terminal output.
std::string render_table(const Table& table);

}  // namespace sinklab
