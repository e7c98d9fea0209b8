"""PCFG chart parsing with exact k-best derivations and PP attachment extraction.

Grammars are read from a small line format (see ``data/grammar.txt``).  Rules
with more than two right-hand-side symbols are binarized internally; the
intermediate symbols are spliced back out when trees are built, so callers
only ever see the rules that were written in the file.

Derivations are ranked by exact probability (rule probabilities are kept as
``Fraction`` objects) and ties are broken by the post-order sequence of rule
ids, which gives a total, reproducible order.
"""
from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Iterable, Iterator, Sequence

PROB_TOLERANCE = 1e-9

NOUN_LABELS = frozenset({"N"})
PREP_LABEL = "P"


class GrammarError(ValueError):
    """Raised for malformed grammar files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(ValueError):
    pass


class UnknownTokenError(ParseError):
    pass


class MalformedTreeError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    id: int
    lhs: str
    rhs: tuple[str, ...]
    prob: Fraction
    line: int
    lexical: bool

    @property
    def logprob(self) -> float:
        return math.log(self.prob)

    def __str__(self):
        return f"{self.lhs} -> {' '.join(self.rhs)} # {float(self.prob):g}"


@dataclass(frozen=True)
class _Edge:
    # binarized hyperedge: parent -> left right; rule is None for internal pieces
    parent: str
    left: str
    right: str
    rule: Rule | None


class Grammar:
    """A validated PCFG plus its binarized form.

    ``rules`` holds the rules as written (lexicon entries included), indexed by
    their position in the file.  ``templates`` are preterminal sequences the
    scene generator fills with words.
    """

    def __init__(self, start: str, rules: list[Rule], templates: list[tuple[tuple[str, ...], float]]):
        self.start = start
        self.rules = rules
        self.templates = templates
        self.nonterminals = frozenset(r.lhs for r in rules)
        self.terminals = frozenset(r.rhs[0] for r in rules if r.lexical)
        self.preterminals = frozenset(r.lhs for r in rules if r.lexical)
        self.lexicon: dict[str, list[Rule]] = defaultdict(list)
        for r in rules:
            if r.lexical:
                self.lexicon[r.rhs[0]].append(r)
        self._edges: dict[tuple[str, str], list[_Edge]] = defaultdict(list)
        self.internal_symbols: set[str] = set()
        for r in rules:
            if not r.lexical:
                self._binarize(r)

    def _binarize(self, rule: Rule) -> None:
        rhs = rule.rhs
        if len(rhs) == 2:
            self._edges[rhs].append(_Edge(rule.lhs, rhs[0], rhs[1], rule))
            return
        names = [f"{rule.lhs}|<{rule.id}:{k}>" for k in range(1, len(rhs) - 1)]
        self.internal_symbols.update(names)
        self._edges[(rhs[0], names[0])].append(_Edge(rule.lhs, rhs[0], names[0], rule))
        for k, name in enumerate(names):
            right = names[k + 1] if k + 1 < len(names) else rhs[-1]
            self._edges[(rhs[k + 1], right)].append(_Edge(name, rhs[k + 1], right, None))

    def words(self, preterminal: str) -> list[str]:
        return [r.rhs[0] for r in self.rules if r.lexical and r.lhs == preterminal]

    def derives(self, symbols: Sequence[str]) -> bool:
        """Whether the start symbol derives the given preterminal sequence."""
        n = len(symbols)
        if n == 0:
            return False
        chart: dict[tuple[int, int], set[str]] = {(i, i + 1): {s} for i, s in enumerate(symbols)}
        for length in range(2, n + 1):
            for i in range(n - length + 1):
                j = i + length
                cell = set()
                for m in range(i + 1, j):
                    for b in chart[i, m]:
                        for c in chart[m, j]:
                            cell.update(e.parent for e in self._edges.get((b, c), ()))
                chart[i, j] = cell
        return self.start in chart[0, n]

    def __len__(self):
        return len(self.rules)


_RULE_RE = re.compile(r"^(\S+)\s*->\s*(.+?)\s*#\s*(\S+)\s*$")


def _parse_prob(text: str, lineno: int) -> Fraction:
    try:
        p = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise GrammarError(f"bad probability {text!r}", lineno) from None
    if p <= 0 or p > 1:
        raise GrammarError(f"probability {text} outside (0, 1]", lineno)
    return p


def load_grammar(text: str) -> Grammar:
    start = None
    raw: list[tuple[int, str, tuple[str, ...], Fraction]] = []
    templates: list[tuple[tuple[str, ...], float]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("%start"):
            parts = stripped.split()
            if len(parts) != 2:
                raise GrammarError("expected '%start SYMBOL'", lineno)
            start = parts[1]
            continue
        if stripped.startswith("%template"):
            body, _, weight = stripped[len("%template"):].partition("#")
            seq = tuple(body.split())
            if not seq:
                raise GrammarError("empty template", lineno)
            try:
                w = float(weight) if weight.strip() else 1.0
            except ValueError:
                raise GrammarError(f"bad template weight {weight.strip()!r}", lineno) from None
            if w < 0:
                raise GrammarError("negative template weight", lineno)
            templates.append((seq, w))
            continue
        m = _RULE_RE.match(stripped)
        if not m:
            raise GrammarError(f"cannot parse rule {stripped!r}", lineno)
        lhs, rhs_text, prob_text = m.groups()
        raw.append((lineno, lhs, tuple(rhs_text.split()), _parse_prob(prob_text, lineno)))

    if start is None:
        raise GrammarError("missing %start directive")
    lhs_set = {lhs for _, lhs, _, _ in raw}
    if start not in lhs_set:
        raise GrammarError(f"start symbol {start} has no rules")

    rules: list[Rule] = []
    seen: dict[tuple[str, tuple[str, ...]], int] = {}
    for lineno, lhs, rhs, prob in raw:
        key = (lhs, rhs)
        if key in seen:
            raise GrammarError(f"duplicate rule {lhs} -> {' '.join(rhs)} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        if len(rhs) == 1:
            if rhs[0] in lhs_set:
                raise GrammarError(f"unary rule {lhs} -> {rhs[0]} is not supported", lineno)
            lexical = True
        else:
            for sym in rhs:
                if sym not in lhs_set:
                    raise GrammarError(f"unknown symbol {sym!r} on right-hand side", lineno)
            lexical = False
        rules.append(Rule(len(rules), lhs, rhs, prob, lineno, lexical))

    totals: dict[str, float] = defaultdict(float)
    first_line: dict[str, int] = {}
    for r in rules:
        totals[r.lhs] += float(r.prob)
        first_line.setdefault(r.lhs, r.line)
    for lhs, total in totals.items():
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise GrammarError(f"probabilities for {lhs} sum to {total:.12g}, not 1", first_line[lhs])

    lexical_lhs = {r.lhs for r in rules if r.lexical}
    mixed = lexical_lhs & {r.lhs for r in rules if not r.lexical}
    if mixed:
        sym = sorted(mixed)[0]
        raise GrammarError(f"{sym} mixes lexical and phrasal rules", first_line[sym])

    grammar = Grammar(start, rules, templates)
    for seq, _ in templates:
        unknown = [s for s in seq if s not in lexical_lhs]
        if unknown:
            raise GrammarError(f"template uses non-preterminal {unknown[0]!r}")
        if not grammar.derives(seq):
            raise GrammarError(f"template {' '.join(seq)} is not derivable from {start}")
    return grammar


def default_grammar_text() -> str:
    return resources.files("ppmediator").joinpath("data/grammar.txt").read_text()


def default_grammar() -> Grammar:
    return load_grammar(default_grammar_text())


# -- trees -----------------------------------------------------------------


@dataclass(frozen=True)
class ParseTree:
    """A constituent over tokens ``[start, end)``.

    Preterminal nodes carry ``token`` and no children.  ``log_prob`` is the
    log probability of the subtree's derivation.
    """

    label: str
    start: int
    end: int
    children: tuple[ParseTree, ...] = ()
    token: str | None = None
    rule_id: int | None = None
    log_prob: float = 0.0

    @property
    def is_preterminal(self) -> bool:
        return self.token is not None

    def rule_ids(self) -> tuple[int, ...]:
        """Post-order sequence of rule ids (leftmost-innermost first)."""
        out: list[int] = []
        for child in self.children:
            out.extend(child.rule_ids())
        if self.rule_id is not None:
            out.append(self.rule_id)
        return tuple(out)

    def leaves(self) -> list[str]:
        if self.is_preterminal:
            return [self.token]
        return [tok for c in self.children for tok in c.leaves()]

    def subtrees(self) -> Iterator[ParseTree]:
        yield self
        for c in self.children:
            yield from c.subtrees()

    def __str__(self):
        if self.is_preterminal:
            return f"({self.label} {self.token})"
        return f"({self.label} {' '.join(str(c) for c in self.children)})"


def tree_from_bracketed(text: str) -> ParseTree:
    """Read a bracketed tree such as ``(S (NP (Det a) (N dog)) ...)``.

    Rule ids and log probabilities are not recoverable from the string and are
    left unset.
    """
    tokens = re.findall(r"\(|\)|[^\s()]+", text)
    pos = 0
    word = 0

    def node() -> ParseTree:
        nonlocal pos, word
        if tokens[pos] != "(":
            raise MalformedTreeError(f"expected '(' at token {pos}")
        label = tokens[pos + 1]
        pos += 2
        if tokens[pos] not in "()":
            tok = tokens[pos]
            if tokens[pos + 1] != ")":
                raise MalformedTreeError(f"preterminal {label} has extra material")
            pos += 2
            word += 1
            return ParseTree(label, word - 1, word, token=tok)
        start = word
        kids = []
        while tokens[pos] == "(":
            kids.append(node())
        if tokens[pos] != ")":
            raise MalformedTreeError("unbalanced brackets")
        pos += 1
        return ParseTree(label, start, word, tuple(kids))

    try:
        tree = node()
    except IndexError:
        raise MalformedTreeError("unbalanced brackets") from None
    if pos != len(tokens):
        raise MalformedTreeError("trailing material after tree")
    return tree


# -- k-best CKY ------------------------------------------------------------


@dataclass(frozen=True)
class _Deriv:
    prob: Fraction
    seq: tuple[int, ...]
    symbol: str
    start: int
    end: int
    rule: Rule | None = None
    token: str | None = None
    kids: tuple[_Deriv, ...] = ()

    @property
    def key(self):
        return (-self.prob, self.seq)


@dataclass(frozen=True)
class PrepAttachment:
    preposition: str
    governor: tuple[int, str]
    dependent: tuple[int, str]
    # token position of the preposition itself; not part of identity
    prep_idx: int | None = field(default=None, compare=False)

    def lemmas(self) -> tuple[str, str, str]:
        return (self.preposition, self.governor[1], self.dependent[1])

    def __str__(self):
        return f"{self.preposition}({self.governor[1]}-{self.governor[0]}, {self.dependent[1]}-{self.dependent[0]})"


@dataclass
class ParseHypothesis:
    tree: ParseTree
    rank: int
    score: float
    attachments: list[PrepAttachment] = field(default_factory=list)


def _kbest_chart(g: Grammar, tokens: Sequence[str], k: int):
    n = len(tokens)
    chart: dict[tuple[int, int], dict[str, list[_Deriv]]] = {}
    for i, tok in enumerate(tokens):
        entries = g.lexicon.get(tok)
        if not entries:
            raise UnknownTokenError(f"token {tok!r} at position {i} is not in the lexicon")
        cell: dict[str, list[_Deriv]] = {}
        for r in entries:
            cell[r.lhs] = [_Deriv(r.prob, (r.id,), r.lhs, i, i + 1, rule=r, token=tok)]
        chart[i, i + 1] = cell

    for length in range(2, n + 1):
        for i in range(n - length + 1):
            j = i + length
            cands: dict[str, list[_Deriv]] = defaultdict(list)
            for m in range(i + 1, j):
                left, right = chart[i, m], chart[m, j]
                if not left or not right:
                    continue
                for b, bl in left.items():
                    for c, cl in right.items():
                        for e in g._edges.get((b, c), ()):
                            p = e.rule.prob if e.rule is not None else 1
                            tail = (e.rule.id,) if e.rule is not None else ()
                            out = cands[e.parent]
                            for d1 in bl:
                                for d2 in cl:
                                    out.append(_Deriv(p * d1.prob * d2.prob, d1.seq + d2.seq + tail,
                                                      e.parent, i, j, rule=e.rule, kids=(d1, d2)))
            cell = {}
            for sym, lst in cands.items():
                lst.sort(key=lambda d: d.key)
                cell[sym] = lst[:k]
            chart[i, j] = cell
    return chart


def _build_tree(g: Grammar, d: _Deriv) -> ParseTree:
    if d.token is not None:
        return ParseTree(d.symbol, d.start, d.end, token=d.token, rule_id=d.rule.id,
                         log_prob=d.rule.logprob)
    kids: list[ParseTree] = []
    for kid in d.kids:
        if kid.symbol in g.internal_symbols:
            kids.extend(_build_tree(g, kid).children)
        else:
            kids.append(_build_tree(g, kid))
    rid = d.rule.id if d.rule is not None else None
    return ParseTree(d.symbol, d.start, d.end, tuple(kids), rule_id=rid,
                     log_prob=math.fsum(g.rules[r].logprob for r in d.seq))


def parse_kbest(g: Grammar, tokens: Sequence[str], k: int) -> list[ParseHypothesis]:
    """Return the ``min(k, #derivations)`` best parses of ``tokens``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tokens = list(tokens)
    if not tokens:
        raise ParseError("empty sentence")
    chart = _kbest_chart(g, tokens, k)
    n = len(tokens)
    top = chart[0, n].get(g.start)
    if not top:
        # report the widest span starting at 0 that some constituent covers
        covered = max((j for j in range(1, n + 1) if chart[0, j]), default=0)
        raise ParseError(
            f"no {g.start} spans {' '.join(tokens)!r}; "
            f"first uncoverable span is [{covered}, {n}) ({' '.join(tokens[covered:])!r})"
            if covered < n else
            f"no {g.start} spans {' '.join(tokens)!r}; span [0, {n}) is covered only by "
            f"{sorted(chart[0, n])}")
    hyps = []
    for rank, d in enumerate(top, 1):
        tree = _build_tree(g, d)
        hyps.append(ParseHypothesis(tree, rank, tree.log_prob, extract_attachments(tree)))
    return hyps


# -- dependencies ----------------------------------------------------------


def _noun_head(np_node: ParseTree, noun_labels=NOUN_LABELS) -> ParseTree | None:
    # rightmost noun, skipping embedded PPs
    for child in reversed(np_node.children):
        if child.label == "PP":
            continue
        if child.is_preterminal and child.label in noun_labels:
            return child
        if child.label == "NP":
            head = _noun_head(child, noun_labels)
            if head is not None:
                return head
    return None


def extract_attachments(tree: ParseTree, noun_labels=NOUN_LABELS) -> list[PrepAttachment]:
    """One attachment per PP node, in left-to-right order of the prepositions.

    The governor is the head noun of the NP the PP modifies; for PPs under a
    VP it is the head noun of the clause's subject NP.
    """
    out: list[tuple[int, PrepAttachment]] = []

    def visit(node: ParseTree, parent: ParseTree | None, clause: ParseTree | None):
        if node.label == "S":
            clause = node
        if node.label == "PP":
            out.append(_pp_attachment(node, parent, clause, noun_labels))
        for child in node.children:
            visit(child, node, clause)

    visit(tree, None, None)
    out.sort(key=lambda t: t[0])
    return [a for _, a in out]


def _pp_attachment(pp, parent, clause, noun_labels):
    prep = next((c for c in pp.children if c.is_preterminal and c.label == PREP_LABEL), None)
    obj = next((c for c in pp.children if c.label == "NP"), None)
    if prep is None or obj is None:
        raise MalformedTreeError(f"PP over [{pp.start}, {pp.end}) lacks a P or NP child")
    dep = _noun_head(obj, noun_labels)
    if dep is None:
        raise MalformedTreeError(f"NP over [{obj.start}, {obj.end}) has no head noun")
    if parent is None:
        raise MalformedTreeError("PP at tree root")
    if parent.label == "NP":
        gov = _noun_head(parent, noun_labels)
    else:
        subj = None
        if clause is not None:
            subj = next((c for c in clause.children if c.label == "NP"), None)
        if subj is None:
            raise MalformedTreeError(f"PP under {parent.label} has no subject NP to govern it")
        gov = _noun_head(subj, noun_labels)
    if gov is None:
        raise MalformedTreeError(f"no governor noun for PP over [{pp.start}, {pp.end})")
    att = PrepAttachment(prep.token, (gov.start, gov.token), (dep.start, dep.token), prep.start)
    return prep.start, att


def attachment_accuracy(pred: Iterable[PrepAttachment], gt: Sequence[PrepAttachment]) -> float:
    """Fraction of ground-truth attachments reproduced, matching on lemmas."""
    gt = list(gt)
    if not gt:
        raise ValueError("attachment accuracy is undefined for an empty ground truth")
    pool: dict[tuple[str, str, str], int] = defaultdict(int)
    for a in pred:
        pool[a.lemmas()] += 1
    hits = 0
    for a in gt:
        key = a.lemmas()
        if pool[key] > 0:
            pool[key] -= 1
            hits += 1
    return hits / len(gt)


def attachment_hits(pred: Iterable[PrepAttachment], gt: Sequence[PrepAttachment]) -> list[bool]:
    """Per-gt-attachment match flags, same matching rule as ``attachment_accuracy``."""
    pool: dict[tuple[str, str, str], int] = defaultdict(int)
    for a in pred:
        pool[a.lemmas()] += 1
    flags = []
    for a in gt:
        key = a.lemmas()
        flags.append(pool[key] > 0)
        if pool[key] > 0:
            pool[key] -= 1
    return flags
