# -*- coding: utf-8 -*-
#
# Sphinx configuration for the orthoplanes documentation.

import os
import sys

# the package is documented from the source tree
sys.path.insert(0, os.path.abspath(os.path.join('..', '..')))

# -- Project information -----------------------------------------------------

project = 'orthoplanes'
copyright = '2024, the orthoplanes contributors'
author = 'the orthoplanes contributors'
release = '0.1.0'
version = '0.1'

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

# heavy imports are not needed to render the prose pages
autodoc_mock_imports = ['scipy', 'pandas']
autodoc_member_order = 'bysource'

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'
exclude_patterns = []

# -- Output ------------------------------------------------------------------

html_theme = 'classic'
html_static_path = ['_static']
htmlhelp_basename = 'orthoplanesdoc'

latex_documents = [
    (master_doc, 'orthoplanes.tex', 'orthoplanes Documentation', author, 'manual'),
]

man_pages = [
    (master_doc, 'orthoplanes', 'orthoplanes Documentation', [author], 1),
]
