from setuptools import setup, find_packages

setup(
    name='confmerge',
    version='1.8.0',
    description='Utilities for confmerge',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=[],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
