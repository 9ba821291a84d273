# Sphinx configuration for the attention-bench documentation.

import os
import sys

sys.path.insert(0, os.path.abspath("../../src"))

project = "attention-bench"
copyright = "2026, attention-bench contributors"
author = "attention-bench contributors"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
    "sphinx.ext.intersphinx",
    "sphinx_autodoc_typehints",
]

# Modules read top to bottom: types first, then the operations built on them.
autodoc_member_order = "bysource"
autodoc_default_options = {"show-inheritance": True}
typehints_defaults = "comma"

# Docstrings use the Args/Returns/Raises layout only.
napoleon_google_docstring = True
napoleon_numpy_docstring = False

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable", None),
    "pandas": ("https://pandas.pydata.org/docs", None),
    "psutil": ("https://psutil.readthedocs.io/en/latest", None),
}

html_theme = "sphinx_rtd_theme"
html_title = "attention-bench"
