#include "debias/templates.hpp"

#include <stdexcept>

#include "debias/util.hpp"

namespace debias::cot {

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("template directory not found: " + dir.string());
  }
  TemplateSet set;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") {
      set.set(entry.path().stem().string(), read_file(entry.path()));
    }
  }
  if (set.templates_.empty()) throw std::runtime_error("no templates in " + dir.string());
  return set;
}

TemplateSet TemplateSet::builtin() { return load(DEBIAS_DEFAULT_TEMPLATE_DIR); }

void TemplateSet::set(std::string name, std::string content) {
  templates_[std::move(name)] = std::move(content);
}

const std::string& TemplateSet::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw std::out_of_range("missing template '" + std::string(name) + "'");
  return it->second;
}

bool TemplateSet::contains(std::string_view name) const {
  return templates_.find(name) != templates_.end();
}

std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string, std::less<>>& vars) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) throw std::invalid_argument("unterminated placeholder");
    const auto key = tmpl.substr(open + 2, close - open - 2);
    auto it = vars.find(key);
    if (it == vars.end()) {
      throw std::invalid_argument("unknown placeholder '{{" + std::string(key) + "}}'");
    }
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

std::string escape_field(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_field(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 1 < text.size()) {
      const char n = text[i + 1];
      if (n == '\\' || n == 'n' || n == 'r') {
        out += n == 'n' ? '\n' : n == 'r' ? '\r' : '\\';
        ++i;
        continue;
      }
    }
    out += text[i];
  }
  return out;
}

}  // namespace debias::cot
