# -*- coding: utf-8 -*-
#
# Sphinx configuration for the simtransfer.eap documentation.

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.pardir, "src")))

import simtransfer.eap

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc', 'sphinx.ext.napoleon', 'sphinx.ext.autosummary',
    'sphinx.ext.intersphinx', 'sphinx.ext.mathjax'
]

intersphinx_mapping = {
    'dask': ('https://docs.dask.org/en/latest/', None),
    'python': ('https://docs.python.org/3/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'pandas': ('https://pandas.pydata.org/docs/', None),
    'xarray': ('https://docs.xarray.dev/en/stable/', None),
}

napoleon_use_admonition_for_examples = True
napoleon_include_special_with_doc = True
autosummary_generate = True

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'simtransfer.eap'
copyright = u'2021, simtransfer developers'
author = u'simtransfer developers'


def read_version():
    with open('../meta.yaml') as f:
        for line in f:
            index = line.find('version')
            if index > -1:
                return line[index + 8:].replace('\'', '').strip()


version = release = read_version()

exclude_patterns = ['_build']
pygments_style = 'sphinx'

# -- Options for HTML output ----------------------------------------------

if os.environ.get('READTHEDOCS') == 'True':
    html_theme = 'default'
else:
    import sphinx_rtd_theme
    html_theme = 'sphinx_rtd_theme'
    html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]

html_static_path = ['_static']
htmlhelp_basename = 'simtransfer-eapdoc'
