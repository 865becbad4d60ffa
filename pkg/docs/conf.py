__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import datetime
import os
import sys

# -- Path setup --------------------------------------------------------------

sys.path.insert(0, os.path.abspath(".."))

# This import must happen after adding to sys.path so docs build is consistent across environments
from buildmonitor import __version__

# -- Project information -----------------------------------------------------

project = "build-monitor"
copyright = f"{datetime.date.today().year}, Alex Laird"
author = "Alex Laird"

version = __version__
release = version

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
    "notfound.extension",
    "sphinx_autodoc_typehints"
]
autodoc_member_order = "bysource"
autodoc_typehints = "description"

source_suffix = [
    ".rst"
]

master_doc = "index"

exclude_patterns = ["build", "Thumbs.db", ".DS_Store", "venv"]

add_function_parentheses = False

pygments_style = "sphinx"

# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"

html_theme_options = {
    "note_bg": "#FFF59C",
}

toc_object_entries = False

html_show_sourcelink = False

html_show_sphinx = False

# -- Extension configuration -------------------------------------------------

intersphinx_mapping = {
    "click": ("https://click.palletsprojects.com/en/latest", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "scipy": ("https://docs.scipy.org/doc/scipy/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
    "python": ("https://docs.python.org/3", None)
}
