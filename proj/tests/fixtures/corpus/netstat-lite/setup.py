from setuptools import setup, find_packages

setup(
    name='netstat-lite',
    version='0.4.1',
    description='Utilities for netstat lite',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=[],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
