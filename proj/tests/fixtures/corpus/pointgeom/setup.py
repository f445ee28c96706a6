from setuptools import setup, find_packages

setup(
    name='pointgeom',
    version='1.4.0',
    description='Utilities for pointgeom',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=[],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
