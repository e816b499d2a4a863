"""Tolerant HTML parsing: tree shape, script capture, interaction targets."""

from hypothesis import given
from hypothesis import strategies as st

from websift.features.htmlparse import parse_html


def test_empty_document():
    doc = parse_html("")
    assert doc.node_count == 0
    assert doc.element_count == 0
    assert doc.root.tag == "#document"


def test_node_count_elements_plus_text_runs():
    # 3 elements (html, body, p) + 1 non-blank text run
    doc = parse_html("<html><body><p>hello</p></body></html>")
    assert doc.element_count == 3
    assert doc.node_count == 4


def test_blank_text_runs_do_not_count():
    doc = parse_html("<div>  \n  </div>")
    assert doc.node_count == 1


def test_unclosed_tags_auto_close():
    doc = parse_html("<div><span>text")
    assert doc.element_count == 2
    div = doc.root.children[0]
    assert div.tag == "div"
    assert div.children[0].tag == "span"
    assert div.children[0].text() == "text"


def test_stray_end_tag_ignored():
    doc = parse_html("</div><p>ok</p>")
    assert doc.element_count == 1
    assert doc.root.children[0].tag == "p"


def test_end_tag_closes_nearest_match():
    # </div> must close span implicitly
    doc = parse_html("<div><span>a</div><p>b</p>")
    assert [c.tag for c in doc.root.children] == ["div", "p"]


def test_void_elements_take_no_children():
    doc = parse_html("<br><p>x</p>")
    assert [c.tag for c in doc.root.children] == ["br", "p"]


def test_inline_script_source_captured():
    doc = parse_html("<script>var a = 1;</script>")
    assert doc.script_tag_count == 1
    assert doc.script_sources == ["var a = 1;"]


def test_script_with_src_contributes_no_source():
    doc = parse_html('<script src="lib.js"></script>')
    assert doc.script_tag_count == 1
    assert doc.script_sources == []


def test_multiple_scripts_in_order():
    doc = parse_html("<script>1;</script><p>x</p><script>2;</script>")
    assert doc.script_sources == ["1;", "2;"]


def test_data_url_script_base64():
    import base64
    payload = base64.b64encode(b"eval(x)").decode()
    doc = parse_html(f'<script src="data:text/javascript;base64,{payload}"></script>')
    assert doc.data_url_script_count == 1
    assert doc.script_sources == ["eval(x)"]


def test_data_url_script_percent_encoded():
    doc = parse_html('<script src="data:text/javascript,alert(%221%22)"></script>')
    assert doc.data_url_script_count == 1
    assert doc.script_sources == ['alert("1")']


def test_event_attributes_counted_by_name():
    doc = parse_html('<body onload="f()"><img onerror="g()"><div onload="h()">')
    assert doc.event_attributes == {"onload": 2, "onerror": 1}
    assert doc.event_total() == 3


def test_plain_on_attribute_is_not_an_event():
    doc = parse_html('<div on="x">')
    assert doc.event_attributes == {}


def test_iframe_count():
    doc = parse_html('<iframe src="a"></iframe><iframe src="b"></iframe>')
    assert doc.iframe_count == 2


def test_links_collected_in_order():
    doc = parse_html('<a href="/x">x</a><a>skip</a><a href="/y">y</a>')
    assert doc.links == ["/x", "/y"]


def test_form_fields_and_password_flag():
    doc = parse_html(
        '<form action="/login" method="POST">'
        '<input name="user" type="text">'
        '<input name="pass" type="password">'
        '<input type="submit">'
        "</form>"
    )
    form = doc.forms[0]
    assert form.action == "/login"
    assert form.method == "post"
    assert form.fields == [("user", "text"), ("pass", "password")]
    assert form.has_password


def test_input_without_type_defaults_to_text():
    doc = parse_html('<form><input name="q"></form>')
    assert doc.forms[0].fields == [("q", "text")]
    assert not doc.forms[0].has_password


def test_inputs_outside_forms_ignored():
    doc = parse_html('<input name="stray"><form action="/s"></form>')
    assert doc.forms[0].fields == []


def test_interactables_document_order():
    doc = parse_html(
        '<a href="/first">1</a>'
        '<form action="/f"></form>'
        '<button formaction="/b">go</button>'
        '<a href="/last">2</a>'
    )
    kinds = [(kind, tgt if kind != "form" else tgt.action)
             for kind, tgt in doc.interactables]
    assert kinds == [("link", "/first"), ("form", "/f"),
                     ("button", "/b"), ("link", "/last")]


def test_button_without_formaction_not_interactable():
    doc = parse_html("<button>plain</button>")
    assert doc.interactables == []


def test_uppercase_tags_normalized():
    doc = parse_html("<DIV><SCRIPT>x=1;</SCRIPT></DIV>")
    assert doc.script_tag_count == 1
    assert doc.script_sources == ["x=1;"]


def test_attribute_access_helper():
    doc = parse_html('<a href="/z" data-k>link</a>')
    a = doc.root.children[0]
    assert a.attr("href") == "/z"
    assert a.attr("data-k") == ""
    assert a.attr("missing") is None


@given(st.text(max_size=800))
def test_parse_total_on_arbitrary_text(text):
    doc = parse_html(text)
    assert doc.node_count >= doc.element_count >= 0
    assert doc.script_tag_count >= doc.data_url_script_count
    assert doc.event_total() == sum(doc.event_attributes.values())
