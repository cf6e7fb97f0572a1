# Sphinx configuration for the sacfl documentation.
#
# Only the options that differ from Sphinx's defaults are set here, see
# https://www.sphinx-doc.org/en/master/usage/configuration.html for the rest.

import inspect
import os
import sys

__location__ = os.path.join(
    os.getcwd(), os.path.dirname(inspect.getfile(inspect.currentframe()))
)

# The package lives in ../src, make it importable for autodoc
sys.path.insert(0, os.path.join(__location__, "../src"))

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.autosummary",
    "sphinx.ext.viewcode",
    "sphinx.ext.doctest",
    "sphinx.ext.mathjax",
    "sphinx.ext.napoleon",
]

autodoc_default_options = {
    "members": True,
    "show-inheritance": True,
}

source_suffix = ".rst"
master_doc = "index"

project = "sacfl"
copyright = "2026, SacFL Developers"

version = ""
release = ""
try:
    from sacfl import __version__ as version
except ImportError:
    pass
else:
    release = version

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store", ".venv"]
pygments_style = "sphinx"

# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"
html_theme_options = {
    "sidebar_width": "300px",
    "page_width": "1200px",
}
htmlhelp_basename = "sacfl-doc"

# -- Options for LaTeX output ------------------------------------------------

latex_documents = [
    ("index", "user_guide.tex", "sacfl Documentation", "SacFL Developers", "manual")
]

# -- External mapping --------------------------------------------------------

python_version = ".".join(map(str, sys.version_info[0:2]))
intersphinx_mapping = {
    "python": ("https://docs.python.org/" + python_version, None),
    "numpy": ("https://numpy.org/doc/stable", None),
}
