"""Declarative model-file format: parse and serialize template graphs.

Line-oriented grammar (full description in docs/model-format.md):

    # comment
    plate <name> card=<int> reduced=<int>
    template <name> [plates=<p1,p2>] dist=<normal|lognormal>
             loc=<float|template> scale=<float|template> [dim=<int>] [observed]

Parsing is strict and reports 1-based line:column positions.  Serialization
produces a normalized form (canonical key order, explicit dim, floats with
round-trip precision); parsing a serialized graph reproduces it exactly.
"""

from __future__ import annotations

import re
from importlib import resources

from .model import PlateDecl, TemplateDecl, TemplateGraph, ValidationError

_TOKEN = re.compile(r"\S+")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ModelFileError(Exception):
    """Syntax or semantic error with source location."""

    def __init__(self, source: str, line: int, col: int, message: str):
        super().__init__(f"{source}:{line}:{col}: {message}")
        self.source = source
        self.line = line
        self.col = col


def _parse_number(text):
    try:
        return float(text)
    except ValueError:
        return None


class _Parser:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source
        self.plates: list[PlateDecl] = []
        self.templates: list[TemplateDecl] = []

    def fail(self, line: int, col: int, message: str):
        raise ModelFileError(self.source, line, col, message)

    def parse(self) -> TemplateGraph:
        for lineno, raw in enumerate(self.text.splitlines(), start=1):
            stripped = raw.split("#", 1)[0]
            if not stripped.strip():
                continue
            tokens = [(m.group(0), m.start() + 1) for m in _TOKEN.finditer(stripped)]
            head, col = tokens[0]
            if head == "plate":
                self._parse_plate(tokens[1:], lineno, col)
            elif head == "template":
                self._parse_template(tokens[1:], lineno, col)
            else:
                self.fail(lineno, col, f"expected 'plate' or 'template', got {head!r}")
        try:
            return TemplateGraph(self.plates, self.templates)
        except ValidationError as exc:
            raise ModelFileError(self.source, 0, 0, str(exc)) from exc

    def _fields(self, tokens, lineno):
        out = {}
        flags = []
        for tok, col in tokens:
            if "=" in tok:
                key, _, val = tok.partition("=")
                if not val:
                    self.fail(lineno, col, f"empty value for {key!r}")
                if key in out:
                    self.fail(lineno, col, f"duplicate field {key!r}")
                out[key] = (val, col)
            else:
                flags.append((tok, col))
        return out, flags

    def _int_field(self, fields, key, lineno, col0):
        if key not in fields:
            self.fail(lineno, col0, f"missing field {key!r}")
        val, col = fields[key]
        if not val.lstrip("-").isdigit():
            self.fail(lineno, col, f"{key} must be an integer, got {val!r}")
        return int(val), col

    def _parse_plate(self, tokens, lineno, col0):
        if not tokens:
            self.fail(lineno, col0, "plate needs a name")
        name, ncol = tokens[0]
        if not _NAME.match(name):
            self.fail(lineno, ncol, f"invalid plate name {name!r}")
        fields, flags = self._fields(tokens[1:], lineno)
        if flags:
            self.fail(lineno, flags[0][1], f"unexpected token {flags[0][0]!r}")
        card, ccol = self._int_field(fields, "card", lineno, col0)
        reduced, rcol = self._int_field(fields, "reduced", lineno, col0)
        for key, (_, col) in fields.items():
            if key not in ("card", "reduced"):
                self.fail(lineno, col, f"unknown plate field {key!r}")
        try:
            self.plates.append(PlateDecl(name, card, reduced))
        except ValidationError as exc:
            self.fail(lineno, rcol, str(exc))

    def _parse_template(self, tokens, lineno, col0):
        if not tokens:
            self.fail(lineno, col0, "template needs a name")
        name, ncol = tokens[0]
        if not _NAME.match(name):
            self.fail(lineno, ncol, f"invalid template name {name!r}")
        fields, flags = self._fields(tokens[1:], lineno)
        observed = False
        for tok, col in flags:
            if tok == "observed":
                observed = True
            else:
                self.fail(lineno, col, f"unexpected token {tok!r}")
        for key, (_, col) in fields.items():
            if key not in ("plates", "dist", "loc", "scale", "dim"):
                self.fail(lineno, col, f"unknown template field {key!r}")

        plates: tuple[str, ...] = ()
        if "plates" in fields:
            val, col = fields["plates"]
            plates = tuple(p for p in val.split(",") if p)
            known = {p.name for p in self.plates}
            for p in plates:
                if p not in known:
                    self.fail(lineno, col, f"unknown plate {p!r}")
        if "dist" not in fields:
            self.fail(lineno, col0, "missing field 'dist'")
        kind, kcol = fields["dist"]
        if kind not in ("normal", "lognormal"):
            self.fail(lineno, kcol, f"unknown distribution {kind!r}")

        def param(key):
            if key not in fields:
                self.fail(lineno, col0, f"missing field {key!r}")
            val, col = fields[key]
            num = _parse_number(val)
            if num is not None:
                return num
            if not _NAME.match(val):
                self.fail(lineno, col, f"{key} must be a number or template name, got {val!r}")
            if val not in {t.name for t in self.templates}:
                self.fail(lineno, col, f"{key} references undeclared template {val!r}")
            return val

        loc = param("loc")
        scale = param("scale")
        dim = 1
        if "dim" in fields:
            dim, _ = self._int_field(fields, "dim", lineno, col0)
        try:
            self.templates.append(TemplateDecl(name, plates, kind, loc, scale, dim, observed))
        except ValidationError as exc:
            self.fail(lineno, ncol, str(exc))


def parse_model_text(text: str, source: str = "<string>") -> TemplateGraph:
    return _Parser(text, source).parse()


def parse_model(path) -> TemplateGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_text(fh.read(), source=str(path))


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def serialize_model(graph: TemplateGraph) -> str:
    """Normalized text form; parse(serialize(g)) == g."""
    lines = []
    for p in graph.plates:
        lines.append(f"plate {p.name} card={p.full_card} reduced={p.reduced_card}")
    for t in graph.templates:
        parts = [f"template {t.name}"]
        if t.plates:
            parts.append("plates=" + ",".join(t.plates))
        parts.append(f"dist={t.kind}")
        parts.append(f"loc={_fmt(t.loc)}")
        parts.append(f"scale={_fmt(t.scale)}")
        parts.append(f"dim={t.dim}")
        if t.observed:
            parts.append("observed")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_bundled(name: str) -> TemplateGraph:
    """Parse one of the models shipped with the package (gre, hv)."""
    text = resources.files("platevi").joinpath(f"models/{name}.model").read_text(encoding="utf-8")
    return parse_model_text(text, source=f"bundled:{name}.model")


def with_overrides(graph: TemplateGraph, cards: dict[str, int] | None = None,
                   reduced: dict[str, int] | None = None,
                   dim: int | None = None) -> TemplateGraph:
    """Rebuild a graph with new plate cardinalities and/or feature dimension."""
    cards = cards or {}
    reduced = reduced or {}
    known = {p.name for p in graph.plates}
    for name in list(cards) + list(reduced):
        if name not in known:
            raise ValidationError(f"unknown plate {name!r} in override")
    plates = [
        PlateDecl(
            p.name,
            int(cards.get(p.name, p.full_card)),
            int(reduced.get(p.name, min(p.reduced_card, cards.get(p.name, p.full_card)))),
        )
        for p in graph.plates
    ]
    templates = [
        TemplateDecl(t.name, t.plates, t.kind, t.loc, t.scale,
                     dim if dim is not None else t.dim, t.observed)
        for t in graph.templates
    ]
    return TemplateGraph(plates, templates)
