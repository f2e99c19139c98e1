#include "sinklab/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "sinklab/config.hpp"
#include "sinklab/error.hpp"

namespace sinklab {

namespace {

std::string cell_to_string(const Table::Cell& cell) {
    if (std::holds_alternative<std::int64_t>(cell))
        return std::to_string(std::get<std::int64_t>(cell));
    if (std::holds_alternative<double>(cell)) return format_double(std::get<double>(cell));
    return std::get<std::string>(cell);
}

}  // namespace

Table make_table(const std::vector<std::pair<std::string, char>>& schema) {
    Table t;
    for (const auto& [name, type] : schema) {
        if (type != 'i' && type != 'r' && type != 's')
            throw ContractError("table column type must be i, r, or s");
        if (name.find(',') != std::string::npos || name.find(':') != std::string::npos)
            throw ContractError("table column name must not contain ',' or ':'");
        t.columns.push_back(name);
        t.types.push_back(type);
    }
    return t;
}

void Table::add_row(std::vector<Cell> row) {
    if (row.size() != columns.size())
        throw ContractError("table row has " + std::to_string(row.size()) + " cells, expected " +
                            std::to_string(columns.size()));
    for (std::size_t i = 0; i < row.size(); ++i) {
        const char t = types[i];
        if ((t == 'i' && !std::holds_alternative<std::int64_t>(row[i])) ||
            (t == 'r' && !std::holds_alternative<double>(row[i])) ||
            (t == 's' && !std::holds_alternative<std::string>(row[i])))
            throw ContractError("cell type mismatch in column '" + columns[i] + "'");
        if (t == 's') {
            const std::string& s = std::get<std::string>(row[i]);
            if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
                throw ContractError("string cells must not contain ',' or newlines");
        }
    }
    rows.push_back(std::move(row));
}

std::string emit_csv(const Table& table) {
    std::string out;
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
        if (c) out += ",";
        out += table.columns[c];
        out += ":";
        out += table.types[c] == 'i' ? "int" : (table.types[c] == 'r' ? "real" : "str");
    }
    out += "\n";
    for (const auto& row : table.rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out += ",";
            out += cell_to_string(row[c]);
        }
        out += "\n";
    }
    return out;
}

Table parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw DataError("parse_csv: empty document");

    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = s.find(',', start);
            if (comma == std::string::npos) {
                parts.push_back(s.substr(start));
                break;
            }
            parts.push_back(s.substr(start, comma - start));
            start = comma + 1;
        }
        return parts;
    };

    std::vector<std::pair<std::string, char>> schema;
    for (const std::string& header : split(line)) {
        const std::size_t colon = header.rfind(':');
        if (colon == std::string::npos)
            throw DataError("parse_csv: header cell '" + header + "' lacks a type");
        const std::string type = header.substr(colon + 1);
        char t;
        if (type == "int")
            t = 'i';
        else if (type == "real")
            t = 'r';
        else if (type == "str")
            t = 's';
        else
            throw DataError("parse_csv: unknown column type '" + type + "'");
        schema.emplace_back(header.substr(0, colon), t);
    }
    Table table = make_table(schema);

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> cells = split(line);
        if (cells.size() != table.columns.size())
            throw DataError("parse_csv: row has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(table.columns.size()));
        std::vector<Table::Cell> row;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            switch (table.types[c]) {
                case 'i': {
                    std::int64_t v = 0;
                    auto [p, ec] =
                        std::from_chars(cells[c].data(), cells[c].data() + cells[c].size(), v);
                    if (ec != std::errc() || p != cells[c].data() + cells[c].size())
                        throw DataError("parse_csv: bad int '" + cells[c] + "'");
                    row.emplace_back(v);
                    break;
                }
                case 'r':
                    row.emplace_back(parse_double(cells[c], "parse_csv cell"));
                    break;
                default:
                    row.emplace_back(cells[c]);
            }
        }
        table.add_row(std::move(row));
    }
    return table;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string render_table(const Table& table) {
    std::vector<std::size_t> widths(table.columns.size());
    std::vector<std::vector<std::string>> cells;
    for (std::size_t c = 0; c < table.columns.size(); ++c)
        widths[c] = table.columns[c].size();
    for (const auto& row : table.rows) {
        std::vector<std::string> r;
        for (std::size_t c = 0; c < row.size(); ++c) {
            r.push_back(cell_to_string(row[c]));
            widths[c] = std::max(widths[c], r.back().size());
        }
        cells.push_back(std::move(r));
    }
    std::string out;
    auto pad = [&](const std::string& s, std::size_t w) {
        out += s;
        out.append(w - s.size() + 2, ' ');
    };
    for (std::size_t c = 0; c < table.columns.size(); ++c) pad(table.columns[c], widths[c]);
    out += "\n";
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) pad(row[c], widths[c]);
        out += "\n";
    }
    return out;
}

}  // namespace sinklab
