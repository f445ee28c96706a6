from setuptools import setup, find_packages

setup(
    name='batchify',
    version='1.18.0',
    description='Utilities for batchify',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=['requests>=2.0'],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
