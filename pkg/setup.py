#''' setup.py is needed, but only to make namespaces happen
from setuptools import setup


#''' moved into function, can now be used other places
def version():
    for line in open('meta.yaml').readlines():
        index = line.find('version')
        if index > -1:
            return line[index + 8:].replace('\'', '').strip()


setup(
    name='simtransfer.eap',
    version=version(),
    package_dir={
        '': 'src',
        'simtransfer': 'src/simtransfer',
        'simtransfer.eap': 'src/simtransfer/eap'
    },
    namespace_packages=['simtransfer'],
    packages=['simtransfer', 'simtransfer.eap'],
    python_requires='>=3.8',
    install_requires=[
        'dask',
        'matplotlib',
        'netcdf4',
        'numpy',
        'pandas',
        'pyyaml',
        'xarray',
    ],
    entry_points={
        'console_scripts': ['simtransfer-eap=simtransfer.eap.cli:main'],
    },
)
