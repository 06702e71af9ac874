import abc
import json
import os
import warnings


def canonical_json(obj):
    """Serialize `obj` in the one canonical form used everywhere.

    Keys are sorted lexicographically, separators are compact, and non-ASCII
    text is kept as UTF-8 rather than escaped. Two equal objects always
    produce identical strings.

    Examples
    --------

    >>> canonical_json({"b": 1, "a": [True, None]})
    '{"a":[true,null],"b":1}'
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class BaseLog(abc.ABC):
    """BaseLog object other event log formats inherit from.

    An event log is an append-only sequence of JSON objects. State that is
    persisted by teamwire (the agent registry, group transcripts, client
    contacts, groups and tasks) is always a fold over one of these logs.

    .. note::

        This is an abstract class and cannot be instantiated directly. To
        create a new log format, subclass `BaseLog` and implement `append`
        and `records`.
    """

    def __init__(self, log_type):
        """Initialize the base log."""
        self.log_type = log_type

    @abc.abstractmethod
    def append(self, record):
        """Should append one record (a JSON-able `dict`) to the log."""
        return

    @property
    @abc.abstractmethod
    def records(self):
        """Should return all records, oldest first, as a `list`."""
        return

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


class FileLog(BaseLog):
    """Event log stored as newline-delimited JSON in a file.

    Each record occupies exactly one line, written in the canonical form of
    :func:`canonical_json`. The file is created if it does not exist, and
    every append is flushed before returning, so a reader in another process
    sees complete lines only.
    """

    def __init__(self, data_path):
        """Initialize a file log.

        Parameters
        ----------
        data_path : `str` or path-like
            Path to the log file. The parent directory must exist; the file
            itself is created when missing.
        """
        self.data_path = data_path
        self.connect()

        super().__init__(log_type="file")

    @property
    def data_path(self):
        """`str` : Path to the log file.

        Notes
        -----
        The setter validates that the parent directory exists, and raises a
        ``FileNotFoundError`` if it does not.
        """
        return self._data_path

    @data_path.setter
    def data_path(self, var):
        var = os.fspath(var)
        parent = os.path.dirname(os.path.abspath(var))
        if os.path.isdir(parent):
            self._data_path = var
        else:
            raise FileNotFoundError("Directory not found for log file: %s" % var)

    def connect(self):
        """Create the log file if it does not exist yet."""
        if not os.path.isfile(self.data_path):
            with open(self.data_path, "a", encoding="utf-8"):
                pass

    def append(self, record):
        line = canonical_json(record) + "\n"
        with open(self.data_path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()

    def append_line(self, line):
        """Append one pre-encoded line (a newline is added if missing)."""
        if not line.endswith("\n"):
            line = line + "\n"
        with open(self.data_path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()

    @property
    def records(self):
        out = []
        with open(self.data_path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        # the text after the last newline is either empty or a torn write
        complete, tail = lines[:-1], lines[-1]
        if tail:
            warnings.warn(
                "Ignoring partially written last line in log: %s" % self.data_path,
                UserWarning,
                stacklevel=2,
            )
        for number, line in enumerate(complete, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(
                    f"Line {number} of {self.data_path} is not valid JSON: {e}"
                ) from e
        return out


class MemoryLog(BaseLog):
    """Event log kept in memory.

    Used when no data directory is configured. Records are deep-copied
    through their canonical JSON form on the way in, so the log never
    aliases caller data.
    """

    def __init__(self, records=None):
        """Initialize the memory log.

        Parameters
        ----------
        records : `list` of `dict`, optional
            Records to start from.
        """
        super().__init__(log_type="memory")
        self._records = []
        for record in records or ():
            self.append(record)

    def append(self, record):
        self._records.append(json.loads(canonical_json(record)))

    @property
    def records(self):
        return list(self._records)


def open_log(directory, name):
    """Open the log called `name` in `directory`.

    Returns a :obj:`FileLog` at ``directory/name.ndjson`` when `directory`
    is given (creating the directory), otherwise a fresh :obj:`MemoryLog`.
    """
    if directory is None:
        return MemoryLog()
    os.makedirs(directory, exist_ok=True)
    return FileLog(os.path.join(directory, name + ".ndjson"))
