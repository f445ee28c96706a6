from setuptools import setup, find_packages

setup(
    name='tokencache',
    version='0.12.1',
    description='Utilities for tokencache',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=[],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
