"""Aligned sequence input and site encoding.

Reads FASTA and sequential PHYLIP into an immutable Alignment whose
encoding tensor holds, per taxon and site, a likelihood vector over the
nucleotide alphabet ACGT: one-hot for observed bases, an indicator over
the compatible subset for IUPAC ambiguity codes, and all-ones for gaps
and 'N' (fully missing data).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHABET = "ACGT"

# IUPAC nucleotide codes -> compatible subset of ACGT
_IUPAC = {
    "A": "A", "C": "C", "G": "G", "T": "T",
    "R": "AG", "Y": "CT", "S": "CG", "W": "AT",
    "K": "GT", "M": "AC",
    "B": "CGT", "D": "AGT", "H": "ACT", "V": "ACG",
    "N": "ACGT", "-": "ACGT",
}

_ENCODE = {}
for _code, _subset in _IUPAC.items():
    _v = np.zeros(4)
    for _ch in _subset:
        _v[ALPHABET.index(_ch)] = 1.0
    _ENCODE[_code] = _v


class SeqIOError(ValueError):
    """Malformed sequence input; message carries a line number."""


def encode_site(ch: str) -> np.ndarray:
    """Likelihood vector over ACGT for one observed character."""
    try:
        return _ENCODE[ch.upper()].copy()
    except KeyError:
        raise SeqIOError(f"illegal character {ch!r}") from None


@dataclass(frozen=True)
class Alignment:
    """N aligned sequences of length S with their site encodings.

    Immutable after construction and safe to share across threads.
    """

    taxa: tuple
    sites: np.ndarray          # (N, S) of single characters
    encoding: np.ndarray = field(init=False, repr=False)  # (N, S, 4)

    def __post_init__(self):
        if len(self.taxa) < 2:
            raise SeqIOError("alignment needs at least 2 taxa")
        if len(set(self.taxa)) != len(self.taxa):
            raise SeqIOError("duplicate taxon name")
        if self.sites.ndim != 2 or self.sites.shape[0] != len(self.taxa):
            raise SeqIOError("sites matrix does not match taxa")
        if self.sites.shape[1] < 1:
            raise SeqIOError("alignment has zero sites")
        enc = np.empty((self.n_taxa, self.n_sites, 4))
        for i in range(self.n_taxa):
            for s in range(self.n_sites):
                enc[i, s] = encode_site(str(self.sites[i, s]))
        enc.setflags(write=False)
        object.__setattr__(self, "encoding", enc)

    @property
    def n_taxa(self) -> int:
        return len(self.taxa)

    @property
    def n_sites(self) -> int:
        return self.sites.shape[1]

    def leaf_vectors(self, taxon_index: int) -> np.ndarray:
        """Encoding for one taxon as a (4, S) array (states by sites)."""
        return self.encoding[taxon_index].T

    def subset_sites(self, site_indices) -> "Alignment":
        """New alignment restricted to the given site columns, in order."""
        idx = np.asarray(site_indices, dtype=int)
        return Alignment(self.taxa, self.sites[:, idx])


def make_alignment(taxa, sequences) -> Alignment:
    """Alignment from name and sequence-string lists (validated)."""
    seqs = [s.upper() for s in sequences]
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        a, b = sorted(lengths)[:2]
        raise SeqIOError(f"unequal sequence lengths ({a} vs {b})")
    sites = np.array([list(s) for s in seqs], dtype="<U1")
    return Alignment(tuple(taxa), sites)


def parse_fasta(text) -> Alignment:
    """Parse FASTA text (a string or a readable stream) into an Alignment.

    Records appear in file order. Errors carry 1-based line numbers.
    """
    if hasattr(text, "read"):
        text = text.read()
    names, seqs, starts = [], [], []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            name = line[1:].strip()
            if not name:
                raise SeqIOError(f"line {lineno}: empty taxon name")
            if name in names:
                raise SeqIOError(f"line {lineno}: duplicate taxon name {name!r}")
            names.append(name)
            seqs.append([])
            starts.append(lineno)
            current = len(names) - 1
        else:
            if current is None:
                raise SeqIOError(f"line {lineno}: sequence data before any '>' header")
            for ch in line:
                if ch.upper() not in _ENCODE:
                    raise SeqIOError(f"line {lineno}: illegal character {ch!r}")
            seqs[current].append(line.upper())
    if not names:
        raise SeqIOError("empty FASTA input")
    joined = ["".join(parts) for parts in seqs]
    lengths = sorted({len(s) for s in joined})
    if len(lengths) > 1:
        raise SeqIOError(f"unequal sequence lengths ({lengths[0]} vs {lengths[-1]})")
    if lengths[0] == 0:
        raise SeqIOError(f"line {starts[joined.index('')]}: record has no sequence data")
    return make_alignment(names, joined)


def write_fasta(aln: Alignment) -> str:
    """Normalized FASTA text: uppercase bases, 60-column wrap."""
    out = []
    for i, name in enumerate(aln.taxa):
        out.append(f">{name}")
        seq = "".join(aln.sites[i])
        for start in range(0, len(seq), 60):
            out.append(seq[start:start + 60])
    return "\n".join(out) + "\n"


def parse_phylip(text) -> Alignment:
    """Parse sequential (non-interleaved) PHYLIP into an Alignment.

    Expects a header line "N S", then N records of a name token followed
    by sequence characters, possibly continued over multiple lines until
    S characters have been read.
    """
    if hasattr(text, "read"):
        text = text.read()
    lines = text.splitlines()
    pos = 0
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos >= len(lines):
        raise SeqIOError("empty PHYLIP input")
    header = lines[pos].split()
    if len(header) < 2:
        raise SeqIOError(f"line {pos + 1}: expected 'N S' header")
    try:
        n, s = int(header[0]), int(header[1])
    except ValueError:
        raise SeqIOError(f"line {pos + 1}: expected 'N S' header") from None
    pos += 1
    names, seqs = [], []
    for _ in range(n):
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise SeqIOError(f"line {len(lines)}: expected {n} records, found {len(names)}")
        parts = lines[pos].split(None, 1)
        name = parts[0]
        chunk = parts[1].replace(" ", "").replace("\t", "") if len(parts) > 1 else ""
        pos += 1
        seq = chunk
        while len(seq) < s:
            if pos >= len(lines):
                raise SeqIOError(f"record {name!r}: sequence shorter than header length {s}")
            seq += lines[pos].strip().replace(" ", "")
            pos += 1
        if len(seq) > s:
            raise SeqIOError(f"record {name!r}: sequence longer than header length {s}")
        for ch in seq:
            if ch.upper() not in _ENCODE:
                raise SeqIOError(f"record {name!r}: illegal character {ch!r}")
        if name in names:
            raise SeqIOError(f"duplicate taxon name {name!r}")
        names.append(name)
        seqs.append(seq.upper())
    return make_alignment(names, seqs)


def read_alignment(path: str) -> Alignment:
    """Read a FASTA or PHYLIP file, sniffing the format from content."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith(">"):
        return parse_fasta(text)
    return parse_phylip(text)
