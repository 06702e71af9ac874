"""Agent registry and lexical discovery.

Agents register a profile (name, type, free-text description). Discovery
ranks registered profiles against a list of desired characteristics with
a deterministic lexical ranker:

* :class:`TfidfRanker` (default): for every characteristic, the TF-IDF
  cosine between the characteristic's token bag and each record's token
  bag, with ``idf(t) = ln((N + 1) / (df(t) + 1)) + 1``; the total score is
  the sum over characteristics.
* :class:`BM25Ranker`: Okapi BM25 with ``k1 = 1.5`` and ``b = 0.75``,
  summed the same way.

Only records with a total score above zero are returned, sorted by score
(descending) then agent name (ascending).
"""

import abc
import collections
import dataclasses
import logging
import threading

import numpy as np
from scipy import sparse

from teamwire.io import MemoryLog
from teamwire.utils import DuplicateName
from teamwire.utils import NotFound
from teamwire.utils import tokenize

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class AgentProfile:
    agent_name: str
    agent_type: str
    agent_description: str

    def __post_init__(self):
        if not self.agent_name:
            raise ValueError("agent_name must be non-empty")
        if self.agent_name.startswith("@"):
            raise ValueError("agent names starting with '@' are reserved")
        if not self.agent_description:
            raise ValueError("agent_description must be non-empty")

    @property
    def text(self):
        return " ".join((self.agent_name, self.agent_type, self.agent_description))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(
            agent_name=obj["agent_name"],
            agent_type=obj.get("agent_type", ""),
            agent_description=obj["agent_description"],
        )


@dataclasses.dataclass(frozen=True)
class RegistryRecord:
    profile: AgentProfile
    token_counts: collections.Counter
    registered_at: int

    @classmethod
    def from_profile(cls, profile, registered_at):
        return cls(
            profile=profile,
            token_counts=collections.Counter(tokenize(profile.text)),
            registered_at=registered_at,
        )


@dataclasses.dataclass(frozen=True)
class SearchQuery:
    characteristics: tuple
    limit: int = 10

    def __post_init__(self):
        if isinstance(self.characteristics, str):
            object.__setattr__(self, "characteristics", (self.characteristics,))
        object.__setattr__(self, "characteristics", tuple(self.characteristics))
        if not self.characteristics:
            raise ValueError("characteristics must be a non-empty list")
        for text in self.characteristics:
            if not tokenize(text):
                raise ValueError(f"characteristic {text!r} has no tokens")
        if self.limit < 1:
            raise ValueError("limit must be positive")


class BaseRanker(abc.ABC):
    """Base class for scoring a query against a term matrix.

    .. note::

        Subclasses implement :meth:`score_characteristic`, which scores one
        characteristic against every record at once.
    """

    name = None

    @abc.abstractmethod
    def score_characteristic(self, index, tokens):
        """Scores (1-D `ndarray`, one per record) for one token list."""
        return


class TfidfRanker(BaseRanker):
    """TF-IDF cosine ranker with smoothed idf."""

    name = "tfidf"

    def score_characteristic(self, index, tokens):
        query = collections.Counter(tokens)
        idf = {t: index.idf(t) for t in query}
        q_norm = np.sqrt(sum((c * idf[t]) ** 2 for t, c in query.items()))
        cols, weights = [], []
        for tok, count in query.items():
            col = index.vocabulary.get(tok)
            if col is not None:
                cols.append(col)
                weights.append(count * idf[tok] * idf[tok])
        scores = np.zeros(index.n_records)
        if not cols or q_norm == 0:
            return scores
        dot = index.counts[:, cols] @ np.asarray(weights)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosine = dot / (index.tfidf_norms * q_norm)
            scores = np.where(index.tfidf_norms > 0, cosine, 0.0)
        return scores


class BM25Ranker(BaseRanker):
    """Okapi BM25 ranker."""

    name = "bm25"

    def __init__(self, k1=1.5, b=0.75):
        self.k1 = k1
        self.b = b

    def score_characteristic(self, index, tokens):
        scores = np.zeros(index.n_records)
        if index.n_records == 0:
            return scores
        lengths = index.lengths
        avgdl = lengths.mean() if lengths.size else 0.0
        norm = self.k1 * (1 - self.b + self.b * lengths / avgdl) if avgdl else self.k1
        for tok in set(tokens):
            col = index.vocabulary.get(tok)
            if col is None:
                continue
            tf = index.counts[:, col].toarray().ravel()
            df = index.df[col]
            idf = np.log(1 + (index.n_records - df + 0.5) / (df + 0.5))
            scores += idf * tf * (self.k1 + 1) / (tf + norm)
        return scores


class TermIndex:
    """Sparse term statistics over a fixed list of records.

    ``counts`` is an (N records x V tokens) CSR matrix of raw token counts.
    """

    def __init__(self, records):
        self.records = list(records)
        self.vocabulary = {}
        rows, cols, vals = [], [], []
        for i, record in enumerate(self.records):
            for tok in sorted(record.token_counts):
                col = self.vocabulary.setdefault(tok, len(self.vocabulary))
                rows.append(i)
                cols.append(col)
                vals.append(record.token_counts[tok])
        shape = (len(self.records), len(self.vocabulary))
        self.counts = sparse.csr_matrix(
            (np.asarray(vals, dtype=float), (rows, cols)), shape=shape
        )
        self.df = np.asarray((self.counts > 0).sum(axis=0)).ravel()
        self.lengths = np.asarray(self.counts.sum(axis=1)).ravel()
        idf_cols = np.log((self.n_records + 1) / (self.df + 1)) + 1
        weighted = self.counts.multiply(idf_cols.reshape(1, -1)).tocsr()
        squares = weighted.multiply(weighted).sum(axis=1)
        self.tfidf_norms = np.sqrt(np.asarray(squares).ravel())

    @property
    def n_records(self):
        return len(self.records)

    def idf(self, token):
        col = self.vocabulary.get(token)
        df = 0 if col is None else self.df[col]
        return np.log((self.n_records + 1) / (df + 1)) + 1


class Registry:
    """Registry of agent profiles with deterministic discovery.

    All public operations are atomic with respect to each other. State is a
    fold over an append-only event log: pass a
    :obj:`~teamwire.io.FileLog` to persist, and a registry built on the same
    log later replays to the same state.

    Parameters
    ----------
    log : :obj:`~teamwire.io.BaseLog`, optional
        Event log to replay and append to. A :obj:`~teamwire.io.MemoryLog`
        is used when omitted.

    ranker : :obj:`BaseRanker`, optional
        Scoring function. Defaults to :obj:`TfidfRanker`.

    Examples
    --------

    >>> reg = Registry()
    >>> a = AgentProfile("A", "Thing Assistant", "finance budgeting expert")
    >>> _ = reg.register_agent(a)
    >>> _ = reg.register_agent(AgentProfile("B", "Thing Assistant", "poetry recital"))
    >>> [p.agent_name for p, _ in reg.search_agents(SearchQuery(["budgeting"]))]
    ['A']
    """

    def __init__(self, log=None, ranker=None):
        self._lock = threading.RLock()
        self._records = {}
        self._sequence = 0
        self._index = None
        self.ranker = ranker or TfidfRanker()
        self.log = log if log is not None else MemoryLog()
        for event in self.log.records:
            self._apply(event)

    def _apply(self, event):
        if event["event"] == "register":
            profile = AgentProfile.from_dict(event["profile"])
            self._sequence += 1
            self._records[profile.agent_name] = RegistryRecord.from_profile(
                profile, self._sequence
            )
        elif event["event"] == "deregister":
            self._records.pop(event["agent_name"], None)
        else:
            raise ValueError(f"unknown registry event {event['event']!r}")
        self._index = None

    def __len__(self):
        with self._lock:
            return len(self._records)

    def __contains__(self, agent_name):
        with self._lock:
            return agent_name in self._records

    @property
    def names(self):
        with self._lock:
            return sorted(self._records)

    def register_agent(self, profile):
        """Register `profile` and make it searchable immediately.

        Raises
        ------
        DuplicateName
            An agent with the same name is already registered.
        """
        with self._lock:
            if profile.agent_name in self._records:
                raise DuplicateName(
                    f"agent {profile.agent_name!r} is already registered"
                )
            event = {"event": "register", "profile": profile.to_dict()}
            self.log.append(event)
            self._apply(event)
            logger.info("registered agent %s", profile.agent_name)
            return self._records[profile.agent_name]

    def deregister_agent(self, agent_name):
        """Remove an agent. Groups it already belongs to are unaffected."""
        with self._lock:
            if agent_name not in self._records:
                raise NotFound(f"no agent named {agent_name!r}")
            event = {"event": "deregister", "agent_name": agent_name}
            self.log.append(event)
            self._apply(event)
            logger.info("deregistered agent %s", agent_name)

    def get_profile(self, agent_name):
        """Profile registered under exactly `agent_name` (case-sensitive)."""
        with self._lock:
            try:
                return self._records[agent_name].profile
            except KeyError:
                raise NotFound(f"no agent named {agent_name!r}") from None

    def get_record(self, agent_name):
        with self._lock:
            try:
                return self._records[agent_name]
            except KeyError:
                raise NotFound(f"no agent named {agent_name!r}") from None

    def _term_index(self):
        if self._index is None:
            ordered = sorted(self._records.values(), key=lambda r: r.registered_at)
            self._index = TermIndex(ordered)
        return self._index

    def search_agents(self, query):
        """Rank registered agents against `query`.

        Parameters
        ----------
        query : :obj:`SearchQuery`

        Returns
        -------
        results : :obj:`list` of (:obj:`AgentProfile`, :obj:`float`)
            Agents with a positive score, best first, ties broken by name,
            at most ``query.limit`` long.
        """
        with self._lock:
            if not self._records:
                return []
            index = self._term_index()
            total = np.zeros(index.n_records)
            for text in query.characteristics:
                total += self.ranker.score_characteristic(index, tokenize(text))
            hits = [
                (record.profile, float(score))
                for record, score in zip(index.records, total, strict=True)
                if score > 0
            ]
        hits.sort(key=lambda hit: (-hit[1], hit[0].agent_name))
        return hits[: query.limit]
