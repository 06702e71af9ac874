import teamwire.sample_data as sample_data
from teamwire._version import __version__

__all__ = ("sample_data", "__version__")
