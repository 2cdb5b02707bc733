"""Cross-lingual masked-LM transfer through bilingual vocabulary matching."""

__version__ = "0.1.0"
